//! Toy decoder-only backbone, low-rank adapters on the attention query and
//! value projections, a frozen token head, and the idea head MLP.
//!
//! Weights live in generic containers (`Weights<T>`) so that the same layout
//! holds plain tensors for storage and tape handles during a forward pass.
//! Parameter names are stable and double as checkpoint keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Future window `K` of the idea head; sets its bias initialization.
    pub window: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            context_len: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            window: crate::objective::DEFAULT_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.context_len < self.window + 1 {
            return fail(format!("context_len {} must be at least window + 1 = {}", self.context_len, self.window + 1));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        Ok(())
    }

    pub fn idea_hidden(&self) -> usize {
        self.d_model
    }

    pub fn lora_scaling(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }
}

/// Which group a parameter belongs to, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    TokenHead,
    Lora,
    Idea,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("lora.") {
            Self::Lora
        } else if name.starts_with("idea.") {
            Self::Idea
        } else if name == "token_head" {
            Self::TokenHead
        } else {
            Self::Backbone
        }
    }
}

/// Biases, gains and other vectors are excluded from weight decay.
pub fn is_decayed(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !name.starts_with("backbone.tok_emb") && !name.starts_with("backbone.pos_emb")
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)+ }
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

param_struct!(
    /// One pre-norm transformer block.
    LayerWeights {
        ln1_gain,
        ln1_bias,
        wq,
        wk,
        wv,
        wo,
        ln2_gain,
        ln2_bias,
        w_up,
        b_up,
        w_down,
        b_down,
    }
);

param_struct!(
    /// Low-rank update `x A B` scaled by `lora_alpha / r`.
    LoraPair { a, b }
);

param_struct!(
    /// `W_idea(ReLU(W_proj h + b_proj)) + b_idea`.
    IdeaHeadWeights {
        w_proj,
        b_proj,
        w_idea,
        b_idea,
    }
);

param_struct!(
    /// Final layer norm.
    FinalNorm { gain, bias }
);

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLora<T> {
    pub q: LoraPair<T>,
    pub v: LoraPair<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: FinalNorm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub backbone: BackboneWeights<T>,
    pub token_head: T,
    /// Empty when the model carries no adapters.
    pub lora: Vec<LayerLora<T>>,
    pub idea: Option<IdeaHeadWeights<T>>,
}

impl<T> Weights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            backbone: BackboneWeights {
                tok_emb: f("backbone.tok_emb", &self.backbone.tok_emb),
                pos_emb: f("backbone.pos_emb", &self.backbone.pos_emb),
                layers: self
                    .backbone
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| l.map(&format!("backbone.layers.{i}."), f))
                    .collect(),
                final_norm: self.backbone.final_norm.map("backbone.final_norm.", f),
            },
            token_head: f("token_head", &self.token_head),
            lora: self
                .lora
                .iter()
                .enumerate()
                .map(|(i, l)| LayerLora {
                    q: l.q.map(&format!("lora.{i}.q."), f),
                    v: l.v.map(&format!("lora.{i}.v."), f),
                })
                .collect(),
            idea: self.idea.as_ref().map(|h| h.map("idea.", f)),
        }
    }

    /// Visits every parameter in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("backbone.tok_emb".into(), &self.backbone.tok_emb);
        f("backbone.pos_emb".into(), &self.backbone.pos_emb);
        for (i, l) in self.backbone.layers.iter().enumerate() {
            l.visit(&format!("backbone.layers.{i}."), f);
        }
        self.backbone.final_norm.visit("backbone.final_norm.", f);
        f("token_head".into(), &self.token_head);
        for (i, l) in self.lora.iter().enumerate() {
            l.q.visit(&format!("lora.{i}.q."), f);
            l.v.visit(&format!("lora.{i}.v."), f);
        }
        if let Some(h) = &self.idea {
            h.visit("idea.", f);
        }
    }

    /// Same order as [`Weights::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("backbone.tok_emb".into(), &mut self.backbone.tok_emb);
        f("backbone.pos_emb".into(), &mut self.backbone.pos_emb);
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("backbone.layers.{i}."), f);
        }
        self.backbone.final_norm.visit_mut("backbone.final_norm.", f);
        f("token_head".into(), &mut self.token_head);
        for (i, l) in self.lora.iter_mut().enumerate() {
            l.q.visit_mut(&format!("lora.{i}.q."), f);
            l.v.visit_mut(&format!("lora.{i}.v."), f);
        }
        if let Some(h) = &mut self.idea {
            h.visit_mut("idea.", f);
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }
}

/// Parameter groups that receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub token_head: bool,
    pub lora: bool,
    pub idea: bool,
}

impl Trainable {
    pub const NONE: Self = Self {
        backbone: false,
        token_head: false,
        lora: false,
        idea: false,
    };
    pub const PRETRAIN: Self = Self {
        backbone: true,
        token_head: true,
        lora: false,
        idea: false,
    };
    pub const ADAPTERS: Self = Self {
        backbone: false,
        token_head: false,
        lora: true,
        idea: true,
    };

    pub fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::TokenHead => self.token_head,
            ParamGroup::Lora => self.lora,
            ParamGroup::Idea => self.idea,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub trainable: Trainable,
    /// Feed the idea head a detached copy of the hidden state, so idea-loss
    /// gradients stop at the head.
    pub detach_idea: bool,
    /// Compute the heads only at these rows of the flattened `[B*T]` positions.
    pub rows: Option<&'a [usize]>,
    pub with_idea: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            trainable: Trainable::NONE,
            detach_idea: false,
            rows: None,
            with_idea: true,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: Weights<Var>,
    /// `[B*T, d_model]` final hidden states.
    pub hidden: Var,
    /// `[rows, V]`
    pub token_logits: Var,
    /// `[rows, V]`, when the model has an idea head and it was requested.
    pub idea_logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

fn scaled(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl Model {
    /// Freshly initialized backbone and token head, no adapters, no idea head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let hidden = 4 * d;
        let proj_std = 1.0 / (d as f32).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f32).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: scaled(&[d, d], proj_std, &mut rng),
                wk: scaled(&[d, d], proj_std, &mut rng),
                wv: scaled(&[d, d], proj_std, &mut rng),
                wo: scaled(&[d, d], out_std, &mut rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: scaled(&[d, hidden], proj_std, &mut rng),
                b_up: Tensor::zeros(&[hidden]),
                w_down: scaled(&[hidden, d], 1.0 / (hidden as f32).sqrt() / (2.0 * config.n_layers as f32).sqrt(), &mut rng),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        let backbone = BackboneWeights {
            tok_emb: scaled(&[v, d], 0.5, &mut rng),
            pos_emb: scaled(&[config.context_len, d], 0.1, &mut rng),
            layers,
            final_norm: FinalNorm {
                gain: Tensor::full(&[d], 1.0),
                bias: Tensor::zeros(&[d]),
            },
        };
        let token_head = scaled(&[d, v], 0.02, &mut rng);
        Ok(Self {
            config,
            weights: Weights {
                backbone,
                token_head,
                lora: Vec::new(),
                idea: None,
            },
        })
    }

    /// Adds q/v adapters to every layer: `A ~ N(0, 1/d)`, `B = 0`.
    pub fn add_lora(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (self.config.d_model, self.config.lora_rank);
        let std = 1.0 / (d as f32).sqrt();
        self.weights.lora = (0..self.config.n_layers)
            .map(|_| LayerLora {
                q: LoraPair {
                    a: scaled(&[d, r], std, &mut rng),
                    b: Tensor::zeros(&[r, d]),
                },
                v: LoraPair {
                    a: scaled(&[d, r], std, &mut rng),
                    b: Tensor::zeros(&[r, d]),
                },
            })
            .collect();
    }

    /// Adds an idea head whose output bias starts at `ln(K / V)`.
    pub fn add_idea_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, h) = (self.config.d_model, self.config.vocab_size, self.config.idea_hidden());
        let bias = (self.config.window as f32 / v as f32).ln();
        self.weights.idea = Some(IdeaHeadWeights {
            w_proj: scaled(&[d, h], 1.0 / (d as f32).sqrt(), &mut rng),
            b_proj: Tensor::zeros(&[h]),
            w_idea: scaled(&[h, v], 0.02, &mut rng),
            b_idea: Tensor::full(&[v], bias),
        });
    }

    pub fn has_idea_head(&self) -> bool {
        self.weights.idea.is_some()
    }

    /// Number of scalars in each group: `(backbone, token_head, lora, idea)`.
    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus::default();
        self.weights.visit(&mut |name, t| {
            let n = t.numel();
            match ParamGroup::of(&name) {
                ParamGroup::Backbone => c.backbone += n,
                ParamGroup::TokenHead => c.token_head += n,
                ParamGroup::Lora => c.lora += n,
                ParamGroup::Idea => c.idea += n,
            }
        });
        c
    }

    /// Registers every parameter on the tape, trainable per `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Weights<Var> {
        self.weights.map(&mut |name, t| tape.leaf(t.clone(), trainable.includes(ParamGroup::of(name))))
    }

    /// Runs the backbone and both heads over a batch of equal-length sequences.
    pub fn forward(&self, tape: &mut Tape, batch: &[&[u32]], opts: ForwardOptions) -> Result<Forward> {
        let params = self.bind(tape, opts.trainable);
        let hidden = self.hidden_states(tape, &params, batch)?;
        let head_in = match opts.rows {
            Some(rows) => tape.select_rows(hidden, rows)?,
            None => hidden,
        };
        let token_logits = token_logits(tape, &params, head_in)?;
        let idea_logits = match (&params.idea, opts.with_idea) {
            (Some(_), true) => {
                let input = if opts.detach_idea { tape.detach(head_in) } else { head_in };
                Some(idea_logits(tape, &params, input)?)
            }
            _ => None,
        };
        Ok(Forward {
            params,
            hidden,
            token_logits,
            idea_logits,
        })
    }

    /// Final hidden states `[B*T, d_model]` for a batch of equal-length sequences.
    pub fn hidden_states(&self, tape: &mut Tape, params: &Weights<Var>, batch: &[&[u32]]) -> Result<Var> {
        let cfg = &self.config;
        let seq = batch.first().map(|s| s.len()).unwrap_or(0);
        if seq == 0 || batch.iter().any(|s| s.len() != seq) {
            return Err(Error::Config("batch must contain non-empty sequences of equal length".into()));
        }
        if seq > cfg.context_len {
            return Err(Error::Config(format!(
                "sequence of {seq} tokens exceeds context length {}",
                cfg.context_len
            )));
        }
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let bb = &params.backbone;
        let tok = tape.gather(bb.tok_emb, &ids)?;
        let pos = tape.gather(bb.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let scale = cfg.lora_scaling();

        for (i, layer) in bb.layers.iter().enumerate() {
            let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
            let mut q = tape.matmul(h, layer.wq)?;
            let k = tape.matmul(h, layer.wk)?;
            let mut v = tape.matmul(h, layer.wv)?;
            if let Some(lora) = params.lora.get(i) {
                q = apply_lora(tape, h, q, &lora.q, scale)?;
                v = apply_lora(tape, h, v, &lora.v, scale)?;
            }
            let att = tape.causal_attention(q, k, v, batch.len(), seq, cfg.n_heads)?;
            let proj = tape.matmul(att, layer.wo)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
            let up = tape.matmul(h2, layer.w_up)?;
            let up = tape.add_bias(up, layer.b_up)?;
            let act = tape.relu(up);
            let down = tape.matmul(act, layer.w_down)?;
            let down = tape.add_bias(down, layer.b_down)?;
            x = tape.add(x, down)?;
        }
        Ok(tape.layer_norm(x, bb.final_norm.gain, bb.final_norm.bias)?)
    }

    /// Hidden states of one sequence as a plain `[T, d_model]` tensor.
    pub fn forward_hidden(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, Trainable::NONE);
        let h = self.hidden_states(&mut tape, &params, &[tokens])?;
        Ok(tape.value(h).clone())
    }

    /// Token and (if present) idea logits at every position of one sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[tokens], ForwardOptions::default())?;
        Ok((
            tape.value(out.token_logits).clone(),
            out.idea_logits.map(|v| tape.value(v).clone()),
        ))
    }
}

fn apply_lora(tape: &mut Tape, input: Var, base: Var, pair: &LoraPair<Var>, scale: f32) -> Result<Var> {
    let down = tape.matmul(input, pair.a)?;
    let up = tape.matmul(down, pair.b)?;
    let delta = tape.mul_scalar(up, scale);
    Ok(tape.add(base, delta)?)
}

/// `h W_head` with the token head.
pub fn token_logits(tape: &mut Tape, params: &Weights<Var>, hidden: Var) -> Result<Var> {
    check_width(tape, params.token_head, hidden)?;
    Ok(tape.matmul(hidden, params.token_head)?)
}

/// The idea head MLP applied per row.
pub fn idea_logits(tape: &mut Tape, params: &Weights<Var>, hidden: Var) -> Result<Var> {
    let head = params
        .idea
        .as_ref()
        .ok_or_else(|| Error::Config("model has no idea head".into()))?;
    check_width(tape, head.w_proj, hidden)?;
    let proj = tape.matmul(hidden, head.w_proj)?;
    let proj = tape.add_bias(proj, head.b_proj)?;
    let act = tape.relu(proj);
    let z = tape.matmul(act, head.w_idea)?;
    Ok(tape.add_bias(z, head.b_idea)?)
}

fn check_width(tape: &Tape, weight: Var, hidden: Var) -> Result<()> {
    let (w, h) = (tape.value(weight).shape(), tape.value(hidden).shape());
    if h.last() != w.first() {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "head",
            lhs: h.to_vec(),
            rhs: w.to_vec(),
        }));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub backbone: usize,
    pub token_head: usize,
    pub lora: usize,
    pub idea: usize,
}

impl ParamCensus {
    pub fn trainable(&self, t: Trainable) -> usize {
        [
            (t.backbone, self.backbone),
            (t.token_head, self.token_head),
            (t.lora, self.lora),
            (t.idea, self.idea),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .sum()
    }
}
