//! Training, decoding and x-ray behaviour on a tiny corpus.

use std::collections::HashMap;
use std::sync::OnceLock;

use igt_core::checkpoint::{self, CheckpointMeta};
use igt_core::corpus::{self, StopwordList};
use igt_core::decode::{self, DecodeConfig, DomainLexicons};
use igt_core::experiment::{self, ExperimentConfig, Prepared};
use igt_core::gate::GateConfig;
use igt_core::model::{Model, Trainable};
use igt_core::train::{self, Arm, StepSpec, TrainLog};
use igt_core::xray;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.corpus.doc_count = 160;
    cfg.corpus.doc_length = 33;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.context_len = 24;
    cfg.window = 6;
    cfg.lora_rank = 2;
    for t in [&mut cfg.pretrain, &mut cfg.adapter] {
        t.batch_size = 8;
        t.seq_len = 16;
        t.eval_every = 10;
    }
    cfg.pretrain.steps = 120;
    cfg.adapter.steps = 40;
    cfg.gate.ramp_steps = 20;
    cfg.bench.n_prompts = 12;
    cfg.bench.decode.max_new_tokens = 8;
    cfg
}

struct Fixture {
    cfg: ExperimentConfig,
    data: Prepared,
    backbone: Model,
    pretrain_log: TrainLog,
    baseline: Model,
    baseline_log: TrainLog,
    gated: Model,
    gated_log: TrainLog,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = tiny_config();
        let data = experiment::prepare(&cfg).unwrap();
        let (backbone, pretrain_log) = experiment::pretrain(&cfg, &data).unwrap();
        let (baseline, baseline_log) = experiment::train_arm(&cfg, &data, &backbone, Arm::Baseline).unwrap();
        let (gated, gated_log) = experiment::train_arm(&cfg, &data, &backbone, Arm::Gated).unwrap();
        Fixture {
            cfg,
            data,
            backbone,
            pretrain_log,
            baseline,
            baseline_log,
            gated,
            gated_log,
        }
    })
}

fn backbone_bits(m: &Model) -> Vec<(String, Vec<u32>)> {
    m.weights
        .named()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("lora.") && !n.starts_with("idea."))
        .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn untrained_model_is_near_uniform() {
    let f = fixture();
    let ppl = f.pretrain_log.evals[0].val_ppl;
    let v = f.data.vocab.len() as f64;
    assert!((ppl - v).abs() < 0.2 * v, "ppl {ppl} vs V {v}");
}

#[test]
fn pretraining_beats_the_unigram_model() {
    let f = fixture();
    let v = f.data.vocab.len();
    let mut counts: HashMap<u32, f64> = HashMap::new();
    for id in f.data.train.iter().flat_map(|s| &s[1..]) {
        *counts.entry(*id).or_default() += 1.0;
    }
    let total: f64 = counts.values().sum::<f64>() + v as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for w in train::eval_windows(&f.data.val, f.cfg.pretrain.seq_len + 1) {
        for id in &w[1..] {
            nll -= ((counts.get(id).copied().unwrap_or(0.0) + 1.0) / total).ln();
            n += 1;
        }
    }
    let unigram = (nll / n as f64).exp();
    let ppl = f.pretrain_log.final_eval().unwrap().val_ppl;
    assert!(ppl < unigram, "model {ppl} vs unigram {unigram}");
}

#[test]
fn adapter_training_leaves_backbone_bits_alone() {
    let f = fixture();
    let before = backbone_bits(&f.backbone);
    assert_eq!(before, backbone_bits(&f.gated));
    assert_eq!(before, backbone_bits(&f.baseline));
    assert_eq!(checkpoint::frozen_hash(&f.backbone), checkpoint::frozen_hash(&f.gated));
}

#[test]
fn arms_start_from_the_same_token_loss() {
    let f = fixture();
    let (b, g) = (&f.baseline_log.steps[0], &f.gated_log.steps[0]);
    assert_eq!(g.alpha, 0.0);
    assert_eq!(b.l_token.to_bits(), g.l_token.to_bits());
}

#[test]
fn alpha_column_follows_the_ramp() {
    let f = fixture();
    let steps = &f.gated_log.steps;
    assert_eq!(steps[0].alpha, 0.0);
    assert_eq!(steps[f.cfg.gate.ramp_steps].alpha, f.cfg.gate.alpha_max);
    assert_eq!(steps.last().unwrap().alpha, f.cfg.gate.alpha_max);
    assert!(f.baseline_log.steps.iter().all(|s| s.alpha == 0.0));
    assert_eq!(f.gated_log.final_eval().unwrap().alpha, f.cfg.gate.inference_alpha);
}

#[test]
fn validation_loss_falls_in_both_arms() {
    let f = fixture();
    for log in [&f.pretrain_log, &f.baseline_log, &f.gated_log] {
        let (first, last) = (&log.evals[0], log.final_eval().unwrap());
        assert!(last.val_token_loss_ungated < first.val_token_loss_ungated, "{first:?} -> {last:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let (model, log) = experiment::train_arm(&f.cfg, &f.data, &f.backbone, Arm::Gated).unwrap();
    assert_eq!(log, f.gated_log);
    assert_eq!(log.steps_csv().unwrap(), f.gated_log.steps_csv().unwrap());
    assert_eq!(model, f.gated);
}

#[test]
fn checkpoint_roundtrip_reproduces_validation_loss() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gated.igt");
    checkpoint::save(&path, &CheckpointMeta::new(f.gated.config.clone()), &f.gated).unwrap();
    let back = checkpoint::load(&path).unwrap().model;
    let gcfg = &f.cfg.gate;
    let a = train::evaluate(&f.gated, &f.data.val, 16, 0.5, gcfg).unwrap();
    let b = train::evaluate(&back, &f.data.val, 16, 0.5, gcfg).unwrap();
    assert!((a.val_token_loss - b.val_token_loss).abs() < 1e-6);
}

fn idea_only_grads(model: &Model, detach: bool, stop: &StopwordList) -> Vec<(String, Vec<f32>)> {
    let f = fixture();
    let windows: Vec<&[u32]> = f.data.train.iter().take(4).map(|s| &s[..17]).collect();
    // lambda alone drives the loss: the token head sees no gate
    let spec = StepSpec {
        trainable: Trainable::ADAPTERS,
        gate: None,
        lambda: 1.0,
        window: model.config.window,
        stopwords: stop,
        detach_idea: detach,
    };
    let mut tape = igt_core::tensor::Tape::new();
    let (params, losses) = train::record_losses(model, &mut tape, &windows, &spec).unwrap();
    tape.backward(losses.idea.unwrap()).unwrap();
    let mut out = Vec::new();
    params.visit(&mut |name, v| {
        if name.starts_with("lora.") {
            if let Some(g) = tape.grad(*v) {
                out.push((name, g.into_data()));
            }
        }
    });
    out
}

#[test]
fn detaching_the_idea_head_stops_adapter_gradients() {
    let f = fixture();
    let stop = &f.data.stopwords;
    // trained adapters have non-zero B, so the idea path can reach A as well
    let detached = idea_only_grads(&f.gated, true, stop);
    assert!(detached.iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));
    let attached = idea_only_grads(&f.gated, false, stop);
    assert!(attached.iter().any(|(_, g)| g.iter().any(|&x| x != 0.0)));
}

#[test]
fn fresh_adapters_match_the_backbone() {
    let f = fixture();
    let arm = train::init_arm(&f.backbone, Arm::Gated, 3).unwrap();
    let g = GateConfig::default();
    let a = train::evaluate(&f.backbone, &f.data.val, 16, 0.0, &g).unwrap();
    let b = train::evaluate(&arm, &f.data.val, 16, 0.0, &g).unwrap();
    assert!((a.val_token_loss - b.val_token_loss).abs() < 1e-5);
}

fn strip_idea(m: &Model) -> Model {
    let mut out = m.clone();
    out.weights.idea = None;
    out
}

#[test]
fn zero_alpha_bench_matches_the_plain_path() {
    let f = fixture();
    let mut bench_cfg = f.cfg.bench.clone();
    bench_cfg.decode.alpha = 0.0;
    let gate = &f.cfg.gate;
    let with_head = decode::run_drift_bench(&f.gated, &f.gated, &f.data.vocab, &f.cfg.corpus, &f.data.docs, &bench_cfg, gate)
        .unwrap();
    let plain = strip_idea(&f.gated);
    let without = decode::run_drift_bench(&plain, &plain, &f.data.vocab, &f.cfg.corpus, &f.data.docs, &bench_cfg, gate)
        .unwrap();
    assert_eq!(with_head.gated.prompts, without.gated.prompts);
    assert_eq!(with_head.gated.drift_rate, with_head.baseline.drift_rate);
}

#[test]
fn zero_alpha_generation_matches_ungated_and_greedy_repeats() {
    let f = fixture();
    let prompt = corpus::tokenize("<bos> the bat", &f.data.vocab);
    let cfg = DecodeConfig {
        alpha: 0.0,
        repetition_penalty: 1.0,
        max_new_tokens: 6,
        ..DecodeConfig::default()
    };
    let g = &f.cfg.gate;
    let gated = decode::generate(&f.gated, &prompt, &cfg, g).unwrap();
    assert_eq!(gated, decode::generate(&strip_idea(&f.gated), &prompt, &cfg, g).unwrap());
    let on = DecodeConfig { alpha: 0.5, ..cfg };
    let first = decode::generate(&f.gated, &prompt, &on, g).unwrap();
    assert_eq!(first, decode::generate(&f.gated, &prompt, &on, g).unwrap());
}

#[test]
fn zero_alpha_xray_reports_no_change() {
    let f = fixture();
    let prompt = corpus::tokenize("<bos> the cave . the bat", &f.data.vocab);
    let r = xray::xray(&f.gated, &f.data.vocab, &prompt, 0.0, &f.cfg.gate, 5).unwrap();
    assert!(r.rows.iter().all(|row| row.delta_pct == 0.0 && row.gate_value == 0.0));
    assert!(r.boosted.is_empty() && r.suppressed.is_empty());
    let lex = DomainLexicons::new(&f.cfg.corpus, &f.data.vocab);
    assert!(lex.is_content(f.data.vocab.id("bat")));
}
