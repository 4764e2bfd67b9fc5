//! Shared finite-difference machinery for the gradient tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use igt_core::corpus::StopwordList;
use igt_core::gate::{self, GateConfig};
use igt_core::model::{Model, ModelConfig, Trainable};
use igt_core::tensor::{Tape, Tensor, Var};
use igt_core::train::{self, StepSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)
pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub fn randn(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Values with magnitude in `[lo, hi)` and random sign, offset by `shift`.
pub fn away_from(shape: &[usize], shift: f32, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            shift + if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `f` over fresh leaves, reduces its output with a fixed random
/// projection, and compares the tape gradient of every input with central
/// differences. Returns the worst norm-wise relative error over inputs.
pub fn check_op<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let probe = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (t0, _, out0) = probe(&inputs);
    let proj = randn(t0.value(out0).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(17));
    let scalar = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let (mut tape, vars, out) = probe(vals);
        let r = tape.constant(proj.clone());
        let prod = tape.mul(out, r).unwrap();
        let s = tape.sum(prod);
        (tape, vars, s)
    };
    let (mut tape, vars, loss) = scalar(&inputs);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().into_data();
        let mut numeric = vec![0.0f32; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let (tp, _, lp) = scalar(&plus);
            let (tm, _, lm) = scalar(&minus);
            *n = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Relative error of every differentiable op, by name.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    let a = randn(&[3, 4], 1.0, &mut rng);
    let b = randn(&[3, 4], 1.0, &mut rng);
    out.push(("add", check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("mul", check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(("add_scalar", check_op(vec![a.clone()], |t, v| t.add_scalar(v[0], 0.7))));
    out.push(("mul_scalar", check_op(vec![a.clone()], |t, v| t.mul_scalar(v[0], -1.3))));
    out.push(("sigmoid", check_op(vec![a.clone()], |t, v| t.sigmoid(v[0]))));
    out.push(("exp", check_op(vec![a.clone()], |t, v| t.exp(v[0]))));
    let pos = away_from(&[3, 4], 1.5, 0.0, 1.0, &mut rng);
    out.push(("log", check_op(vec![pos], |t, v| t.log(v[0]).unwrap())));
    let kinked = away_from(&[3, 4], 0.0, 0.1, 2.0, &mut rng);
    out.push(("relu", check_op(vec![kinked], |t, v| t.relu(v[0]))));
    let clamped = away_from(&[3, 4], -0.3, 0.1, 2.0, &mut rng);
    out.push(("max_scalar", check_op(vec![clamped], |t, v| t.max_scalar(v[0], -0.3))));

    let m = randn(&[3, 5], 1.0, &mut rng);
    let w = randn(&[5, 4], 1.0, &mut rng);
    out.push(("matmul", check_op(vec![m.clone(), w], |t, v| t.matmul(v[0], v[1]).unwrap())));
    let bias = randn(&[5], 1.0, &mut rng);
    out.push(("add_bias", check_op(vec![m.clone(), bias], |t, v| t.add_bias(v[0], v[1]).unwrap())));
    out.push(("sum", check_op(vec![m.clone()], |t, v| t.sum(v[0]))));
    out.push(("mean", check_op(vec![m.clone()], |t, v| t.mean(v[0]))));
    let table = randn(&[6, 4], 1.0, &mut rng);
    out.push(("gather", check_op(vec![table], |t, v| t.gather(v[0], &[2, 0, 2, 5]).unwrap())));
    out.push(("select_rows", check_op(vec![m], |t, v| t.select_rows(v[0], &[2, 0, 2]).unwrap())));

    let x = randn(&[4, 6], 1.0, &mut rng);
    let gain = away_from(&[6], 1.0, 0.0, 0.3, &mut rng);
    let beta = randn(&[6], 1.0, &mut rng);
    out.push(("layer_norm", check_op(vec![x, gain, beta], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())));

    let (bs, s, h, d) = (2, 4, 2, 3);
    let q = randn(&[bs * s, h * d], 0.8, &mut rng);
    let k = randn(&[bs * s, h * d], 0.8, &mut rng);
    let val = randn(&[bs * s, h * d], 0.8, &mut rng);
    out.push((
        "causal_attention",
        check_op(vec![q, k, val], |t, x| t.causal_attention(x[0], x[1], x[2], bs, s, h).unwrap()),
    ));

    let logits = randn(&[4, 6], 1.0, &mut rng);
    out.push((
        "cross_entropy",
        check_op(vec![logits.clone()], |t, v| t.cross_entropy(v[0], &[1, 5, 0, 1]).unwrap()),
    ));
    let targets: Vec<f32> = (0..24).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let mask: Vec<bool> = (0..6).map(|i| i == 2).collect();
    let valid = [true, false, true, true];
    out.push((
        "bce_with_logits",
        check_op(vec![logits], |t, v| t.bce_with_logits(v[0], &targets, &mask, &valid).unwrap()),
    ));

    // Idea logits sit well above the clamp threshold so the kink is not probed.
    let cfg = GateConfig::default();
    let z_tok = randn(&[3, 5], 1.0, &mut rng);
    let z_idea = randn(&[3, 5], 0.5, &mut rng);
    out.push((
        "gate",
        check_op(vec![z_tok, z_idea], |t, v| {
            let g = gate::compute_gate(t, v[1], 0.5, &cfg).unwrap();
            gate::fuse(t, v[0], g).unwrap()
        }),
    ));
    out
}

/// V=16, d=8, T=8 model with adapters and an idea head, plus two training
/// windows of T+1 tokens.
pub fn tiny_model() -> (Model, Vec<Vec<u32>>) {
    tiny_model_with_seed(15)
}

pub fn tiny_model_with_seed(seed: u64) -> (Model, Vec<Vec<u32>>) {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        window: 3,
    };
    let mut m = Model::new(cfg, 11).unwrap();
    m.add_lora(12);
    m.add_idea_head(13);
    // Non-zero B so gradients reach both LoRA factors.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.weights.visit_mut(&mut |name, t| {
        if name.starts_with("lora.") && name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    });
    let windows = (0..2).map(|_| (0..9).map(|_| rng.random_range(0..16)).collect()).collect();
    (m, windows)
}

/// Relative error of the full `L_token + λ·L_idea` gradient (gate at α=0.5)
/// with respect to every parameter, and the number of coordinates checked.
pub fn end_to_end() -> (f64, usize) {
    let (model, windows) = tiny_model();
    let refs: Vec<&[u32]> = windows.iter().map(Vec::as_slice).collect();
    let gate_cfg = GateConfig::default();
    let stop = StopwordList {
        ids: BTreeSet::from([0, 1, 2, 7]),
        n: 1,
    };
    let spec = StepSpec {
        trainable: Trainable {
            backbone: true,
            token_head: true,
            lora: true,
            idea: true,
        },
        gate: Some((0.5, &gate_cfg)),
        lambda: 1.0,
        window: 3,
        stopwords: &stop,
        detach_idea: false,
    };
    let out = train::compute_step(&model, &refs, &spec).unwrap();
    let loss_of = |m: &Model| {
        let mut tape = Tape::new();
        let (_, l) = train::record_losses(m, &mut tape, &refs, &spec).unwrap();
        tape.value(l.total).item()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, g) in &out.grads {
        for (j, &gj) in g.iter().enumerate() {
            let bump = |delta: f32| {
                let mut m = model.clone();
                m.weights.visit_mut(&mut |n, t| {
                    if n == *name {
                        t.data_mut()[j] += delta;
                    }
                });
                loss_of(&m)
            };
            analytic.push(gj);
            numeric.push((bump(H) - bump(-H)) / (2.0 * H));
        }
    }
    (rel_err(&analytic, &numeric), analytic.len())
}
