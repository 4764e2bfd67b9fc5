//! AdamW, backbone pretraining, the two adapter-training arms, and
//! validation perplexity.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StopwordList;
use crate::gate::{self, GateConfig};
use crate::model::{is_decayed, ForwardOptions, Model, ModelConfig, ParamGroup, Trainable, Weights};
use crate::objective::{self, IdeaTarget, LossWeights};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Gated,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Gated => "gated",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "gated" => Ok(Arm::Gated),
            other => Err(Error::Config(format!("unknown arm '{other}' (expected baseline|gated)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Input positions per training sequence; windows hold `seq_len + 1` tokens.
    pub seq_len: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub eval_every: usize,
    pub seed: u64,
    pub lambda: f32,
    pub detach_idea_from_lora: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            seq_len: 128,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_every: 100,
            seed: 0,
            lambda: 1.0,
            detach_idea_from_lora: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.seq_len > 0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0
            && self.eval_every > 0
            && self.lambda >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param, grad)` triple. `decay`
    /// chooses which parameters get `param *= 1 - lr * wd`.
    pub fn step(&mut self, updates: Vec<(String, &mut Tensor, &[f32])>, decay: impl Fn(&str, &[usize]) -> bool) -> Result<()> {
        self.check(updates.iter().map(|(n, _, g)| (n.as_str(), *g)))?;
        let bc = self.advance();
        for (name, param, grad) in updates {
            let d = decay(&name, param.shape());
            self.update_one(&name, param, grad, d, bc);
        }
        Ok(())
    }

    /// One update of the parameters of `weights` named in `grads`.
    pub fn step_weights(&mut self, weights: &mut Weights<Tensor>, grads: &[(String, Vec<f32>)]) -> Result<()> {
        self.check(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())))?;
        let bc = self.advance();
        let by_name: HashMap<&str, &[f32]> = grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();
        weights.visit_mut(&mut |name, t| {
            if let Some(g) = by_name.get(name.as_str()) {
                let d = is_decayed(&name, t.shape());
                self.update_one(&name, t, g, d, bc);
            }
        });
        Ok(())
    }

    fn check<'a>(&self, grads: impl Iterator<Item = (&'a str, &'a [f32])>) -> Result<()> {
        for (name, g) in grads {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    msg: format!("gradient of '{name}' contains {bad}"),
                });
            }
        }
        Ok(())
    }

    /// Increments the step count and returns the bias corrections.
    fn advance(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - (self.beta1 as f64).powi(t), 1.0 - (self.beta2 as f64).powi(t))
    }

    fn update_one(&mut self, name: &str, param: &mut Tensor, grad: &[f32], decay: bool, (bc1, bc2): (f64, f64)) {
        let n = param.numel();
        let (beta1, beta2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.lr as f64, self.eps as f64);
        let shrink = if decay { 1.0 - self.lr * self.weight_decay } else { 1.0 };
        let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *p *= shrink;
            *p -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: f32,
    pub l_total: f32,
    pub l_token: f32,
    pub l_idea: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub alpha: f32,
    pub val_token_loss: f64,
    pub val_ppl: f64,
    /// Validation loss of the same weights with the gate disabled.
    pub val_token_loss_ungated: f64,
}

/// Append-only training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Columns: `step,alpha,l_total,l_token,l_idea,grad_norm`.
    pub fn steps_csv(&self) -> Result<String> {
        to_csv(&self.steps)
    }

    /// Columns: `step,alpha,val_token_loss,val_ppl,val_token_loss_ungated`.
    pub fn evals_csv(&self) -> Result<String> {
        to_csv(&self.evals)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("train_log.csv"), self.steps_csv()?)?;
        std::fs::write(dir.join("eval_log.csv"), self.evals_csv()?)?;
        Ok(())
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Samples fixed-length windows from tokenized documents.
pub struct Batcher<'a> {
    seqs: &'a [Vec<u32>],
    window: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(seqs: &'a [Vec<u32>], seq_len: usize, seed: u64) -> Result<Self> {
        let window = seq_len + 1;
        if seqs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(short) = seqs.iter().find(|s| s.len() < window) {
            return Err(Error::Config(format!(
                "training sequence of {} tokens is shorter than seq_len + 1 = {window}",
                short.len()
            )));
        }
        Ok(Self {
            seqs,
            window,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<&'a [u32]> {
        (0..size)
            .map(|_| {
                let s = &self.seqs[self.rng.random_range(0..self.seqs.len())];
                let off = self.rng.random_range(0..=s.len() - self.window);
                &s[off..off + self.window]
            })
            .collect()
    }
}

/// What one optimization step computes.
#[derive(Clone, Copy, Debug)]
pub struct StepSpec<'a> {
    pub trainable: Trainable,
    /// `Some(alpha)` routes token logits through the gate.
    pub gate: Option<(f32, &'a GateConfig)>,
    pub lambda: f32,
    pub window: usize,
    pub stopwords: &'a StopwordList,
    pub detach_idea: bool,
}

/// Loss values and named gradients of one batch.
pub struct StepOutcome {
    pub l_total: f32,
    pub l_token: f32,
    pub l_idea: f32,
    pub grads: Vec<(String, Vec<f32>)>,
}

/// Forward pass over `windows` (each `seq_len + 1` tokens) and the losses,
/// recorded on `tape`. Returns the forward handles and losses.
pub fn record_losses(
    model: &Model,
    tape: &mut Tape,
    windows: &[&[u32]],
    spec: &StepSpec,
) -> Result<(Weights<Var>, objective::Losses)> {
    let inputs: Vec<&[u32]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let next: Vec<u32> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let with_idea = model.has_idea_head() && (spec.gate.is_some() || spec.lambda > 0.0);
    let opts = ForwardOptions {
        trainable: spec.trainable,
        detach_idea: spec.detach_idea,
        rows: None,
        with_idea,
    };
    let out = model.forward(tape, &inputs, opts)?;
    let z_final = match (spec.gate, out.idea_logits) {
        (Some((alpha, cfg)), Some(z_idea)) => {
            let g = gate::compute_gate(tape, z_idea, alpha, cfg)?;
            gate::fuse(tape, out.token_logits, g)?
        }
        (Some(_), None) => return Err(Error::Config("gated step requires an idea head".into())),
        (None, _) => out.token_logits,
    };
    let targets: Vec<IdeaTarget> = if out.idea_logits.is_some() {
        let mut all = Vec::with_capacity(next.len());
        for w in windows {
            all.extend(objective::build_targets(w, spec.window, model.config.vocab_size)?);
        }
        all
    } else {
        Vec::new()
    };
    let losses = objective::total_loss(
        tape,
        z_final,
        out.idea_logits,
        &next,
        &targets,
        spec.stopwords,
        LossWeights { lambda: spec.lambda },
    )?;
    Ok((out.params, losses))
}

pub fn compute_step(model: &Model, windows: &[&[u32]], spec: &StepSpec) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let (params, losses) = record_losses(model, &mut tape, windows, spec)?;
    tape.backward(losses.total)?;
    let mut grads = Vec::new();
    params.visit(&mut |name, v| {
        if spec.trainable.includes(ParamGroup::of(&name)) {
            let g = tape
                .grad(*v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]);
            grads.push((name, g));
        }
    });
    Ok(StepOutcome {
        l_total: tape.value(losses.total).item(),
        l_token: tape.value(losses.token).item(),
        l_idea: objective::loss_value(&tape, losses.idea),
        grads,
    })
}

/// Scales gradients in place to a global norm of at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Vec<f32>)], max_norm: f32) -> f32 {
    let sq: f64 = grads.iter().flat_map(|(_, g)| g.iter()).map(|&x| (x as f64) * (x as f64)).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

fn check_finite(step: usize, out: &StepOutcome) -> Result<()> {
    if !out.l_total.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("loss is {}", out.l_total),
        });
    }
    Ok(())
}

/// Mean per-token cross-entropy and perplexity on held-out data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub val_token_loss: f64,
    pub ppl: f64,
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

/// Cuts sequences into windows of at most `window` tokens (windows shorter
/// than two tokens are dropped).
pub fn eval_windows(seqs: &[Vec<u32>], window: usize) -> Vec<&[u32]> {
    seqs.iter()
        .flat_map(|s| s.chunks(window.max(2)))
        .filter(|w| w.len() >= 2)
        .collect()
}

/// Token-weighted mean cross-entropy of the fused logits at `alpha` (the gate
/// is skipped when `alpha == 0` or the model has no idea head).
pub fn evaluate(model: &Model, seqs: &[Vec<u32>], seq_len: usize, alpha: f32, gate_cfg: &GateConfig) -> Result<EvalResult> {
    let window = (seq_len + 1).min(model.config.context_len + 1);
    let windows = eval_windows(seqs, window);
    if windows.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut by_len: std::collections::BTreeMap<usize, Vec<&[u32]>> = Default::default();
    for w in windows {
        by_len.entry(w.len()).or_default().push(w);
    }
    let empty = StopwordList {
        ids: Default::default(),
        n: 0,
    };
    let gated = alpha > 0.0 && model.has_idea_head();
    let spec = StepSpec {
        trainable: Trainable::NONE,
        gate: gated.then_some((alpha, gate_cfg)),
        lambda: 0.0,
        window: model.config.window,
        stopwords: &empty,
        detach_idea: false,
    };
    let mut total = 0.0f64;
    let mut count = 0usize;
    for group in by_len.values() {
        for chunk in group.chunks(32) {
            let mut tape = Tape::new();
            let (_, losses) = record_losses(model, &mut tape, chunk, &spec)?;
            let tokens = chunk.iter().map(|w| w.len() - 1).sum::<usize>();
            total += tape.value(losses.token).item() as f64 * tokens as f64;
            count += tokens;
        }
    }
    let loss = total / count as f64;
    Ok(EvalResult {
        val_token_loss: loss,
        ppl: perplexity(loss),
    })
}

/// Trains backbone and token head on next-token prediction, then returns
/// the model (without adapters) and its log.
pub fn pretrain_backbone(
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::new(config, cfg.seed)?;
    let gate_cfg = GateConfig::default();
    let empty = StopwordList {
        ids: Default::default(),
        n: 0,
    };
    let spec = StepSpec {
        trainable: Trainable::PRETRAIN,
        gate: None,
        lambda: 0.0,
        window: model.config.window,
        stopwords: &empty,
        detach_idea: false,
    };
    let mut batcher = Batcher::new(train, cfg.seq_len, cfg.seed.wrapping_add(1))?;
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        if step % cfg.eval_every == 0 && !val.is_empty() {
            log.evals.push(eval_record(&model, val, cfg.seq_len, step, 0.0, &gate_cfg)?);
        }
        let windows = batcher.next_batch(cfg.batch_size);
        let mut out = compute_step(&model, &windows, &spec)?;
        check_finite(step, &out)?;
        let grad_norm = clip_global_norm(&mut out.grads, cfg.grad_clip);
        log.steps.push(StepRecord {
            step,
            alpha: 0.0,
            l_total: out.l_total,
            l_token: out.l_token,
            l_idea: 0.0,
            grad_norm,
        });
        opt.step_weights(&mut model.weights, &out.grads)?;
    }
    if !val.is_empty() {
        log.evals.push(eval_record(&model, val, cfg.seq_len, cfg.steps, 0.0, &gate_cfg)?);
    }
    Ok((model, log))
}

fn eval_record(model: &Model, val: &[Vec<u32>], seq_len: usize, step: usize, alpha: f32, gate_cfg: &GateConfig) -> Result<EvalRecord> {
    let gated = evaluate(model, val, seq_len, alpha, gate_cfg)?;
    let ungated = if alpha > 0.0 && model.has_idea_head() {
        evaluate(model, val, seq_len, 0.0, gate_cfg)?.val_token_loss
    } else {
        gated.val_token_loss
    };
    Ok(EvalRecord {
        step,
        alpha,
        val_token_loss: gated.val_token_loss,
        val_ppl: gated.ppl,
        val_token_loss_ungated: ungated,
    })
}

/// Everything one adapter-training arm needs.
pub struct ArmSetup<'a> {
    pub arm: Arm,
    /// Pretrained, frozen backbone and token head (adapters are added here).
    pub backbone: &'a Model,
    pub train: &'a [Vec<u32>],
    pub val: &'a [Vec<u32>],
    pub stopwords: &'a StopwordList,
    pub train_cfg: &'a TrainConfig,
    pub gate_cfg: &'a GateConfig,
}

/// Adds adapters (and for the gated arm, the idea head) to a copy of the
/// backbone and trains them. The baseline arm uses `alpha = 0` and
/// `lambda = 0`; the gated arm follows the alpha ramp. Evaluations run every
/// `eval_every` steps at the current alpha, and once more at the end at
/// `inference_alpha`.
pub fn train_arm(setup: &ArmSetup) -> Result<(Model, TrainLog)> {
    let cfg = setup.train_cfg;
    cfg.validate()?;
    setup.gate_cfg.validate()?;
    let mut model = init_arm(setup.backbone, setup.arm, cfg.seed)?;
    let gated = setup.arm == Arm::Gated;
    let mut batcher = Batcher::new(setup.train, cfg.seq_len, cfg.seed.wrapping_add(1))?;
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let alpha = if gated { gate::alpha_at(step, setup.gate_cfg) } else { 0.0 };
        if step % cfg.eval_every == 0 && !setup.val.is_empty() {
            log.evals.push(eval_record(&model, setup.val, cfg.seq_len, step, alpha, setup.gate_cfg)?);
        }
        let spec = StepSpec {
            trainable: Trainable::ADAPTERS,
            gate: gated.then_some((alpha, setup.gate_cfg)),
            lambda: if gated { cfg.lambda } else { 0.0 },
            window: model.config.window,
            stopwords: setup.stopwords,
            detach_idea: cfg.detach_idea_from_lora,
        };
        let windows = batcher.next_batch(cfg.batch_size);
        let mut out = compute_step(&model, &windows, &spec)?;
        check_finite(step, &out)?;
        let grad_norm = clip_global_norm(&mut out.grads, cfg.grad_clip);
        log.steps.push(StepRecord {
            step,
            alpha,
            l_total: out.l_total,
            l_token: out.l_token,
            l_idea: out.l_idea,
            grad_norm,
        });
        opt.step_weights(&mut model.weights, &out.grads)?;
    }
    if !setup.val.is_empty() {
        let alpha = if gated { setup.gate_cfg.inference_alpha } else { 0.0 };
        log.evals.push(eval_record(&model, setup.val, cfg.seq_len, cfg.steps, alpha, setup.gate_cfg)?);
    }
    Ok((model, log))
}

/// Copy of `backbone` with fresh adapters (and an idea head for the gated
/// arm). Both arms draw identical adapter initializations from `seed`.
pub fn init_arm(backbone: &Model, arm: Arm, seed: u64) -> Result<Model> {
    let mut model = backbone.clone();
    model.weights.lora.clear();
    model.weights.idea = None;
    model.add_lora(seed.wrapping_add(101));
    if arm == Arm::Gated {
        model.add_idea_head(seed.wrapping_add(202));
    }
    Ok(model)
}
