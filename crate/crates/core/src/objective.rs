//! Future-window bag-of-words targets and the combined training loss.

use serde::{Deserialize, Serialize};

use crate::corpus::StopwordList;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 20;

/// Unique token ids among the next `K` tokens after one position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdeaTarget {
    /// Sorted, deduplicated ids marked 1 in the multi-hot vector.
    pub positives: Vec<u32>,
    pub valid: bool,
}

impl IdeaTarget {
    pub fn dense(&self, vocab_size: usize) -> Vec<f32> {
        let mut y = vec![0.0; vocab_size];
        for &i in &self.positives {
            y[i as usize] = 1.0;
        }
        y
    }

    pub fn popcount(&self) -> usize {
        self.positives.len()
    }
}

/// For each position `t` in `0..T-1`, the set of ids in
/// `tokens[t+1 ..= min(t+K, T-1)]`.
pub fn build_targets(tokens: &[u32], window: usize, vocab_size: usize) -> Result<Vec<IdeaTarget>> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let last = tokens.len() - 1;
    let mut out = Vec::with_capacity(last);
    for t in 0..last {
        let end = (t + window).min(last);
        let mut positives: Vec<u32> = tokens.get(t + 1..=end).unwrap_or(&[]).to_vec();
        positives.sort_unstable();
        positives.dedup();
        let valid = !positives.is_empty();
        out.push(IdeaTarget { positives, valid });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// The three scalar losses recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub token: Var,
    /// `None` when no position had a non-empty window.
    pub idea: Option<Var>,
}

/// `L_token` is the mean cross-entropy of `z_final[t]` against
/// `next_tokens[t]`. `L_idea` is the mean over valid positions of the masked
/// BCE between `z_idea[t]` and the position's target. The total is
/// `L_token + lambda * L_idea`; the idea loss is still recorded when
/// `lambda == 0` but then does not enter the total.
pub fn total_loss(
    tape: &mut Tape,
    z_final: Var,
    z_idea: Option<Var>,
    next_tokens: &[u32],
    targets: &[IdeaTarget],
    stopwords: &StopwordList,
    weights: LossWeights,
) -> Result<Losses> {
    if weights.lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let next: Vec<usize> = next_tokens.iter().map(|&t| t as usize).collect();
    let token = tape.cross_entropy(z_final, &next)?;

    let idea = match z_idea {
        Some(z) => {
            let shape = tape.value(z).shape().to_vec();
            let (rows, vocab) = match shape.as_slice() {
                [r, v] => (*r, *v),
                [v] => (1, *v),
                _ => return Err(Error::Config(format!("idea logits must be [T, V], got {shape:?}"))),
            };
            if targets.len() != rows {
                return Err(Error::Config(format!("{} idea targets for {rows} positions", targets.len())));
            }
            let valid: Vec<bool> = targets.iter().map(|t| t.valid).collect();
            if valid.iter().any(|&v| v) {
                let mut dense = Vec::with_capacity(rows * vocab);
                for t in targets {
                    dense.extend(t.dense(vocab));
                }
                let mask = stopwords.loss_mask(vocab);
                Some(tape.bce_with_logits(z, &dense, &mask, &valid)?)
            } else {
                log::warn!("no valid idea-target positions; idea loss set to 0");
                None
            }
        }
        None => None,
    };

    let total = match idea {
        Some(l) if weights.lambda > 0.0 => {
            let scaled = tape.mul_scalar(l, weights.lambda);
            tape.add(token, scaled)?
        }
        _ => token,
    };
    Ok(Losses { total, token, idea })
}

/// Scalar value of a loss, with `0` for an absent idea loss.
pub fn loss_value(tape: &Tape, v: Option<Var>) -> f32 {
    v.map(|v| tape.value(v).item()).unwrap_or(0.0)
}

/// Builds the dense target block `[positions, V]` for several sequences.
pub fn stack_targets(targets: &[IdeaTarget], vocab_size: usize) -> Tensor {
    let mut data = Vec::with_capacity(targets.len() * vocab_size);
    for t in targets {
        data.extend(t.dense(vocab_size));
    }
    Tensor::new(vec![targets.len(), vocab_size], data).expect("dense targets are rectangular")
}
