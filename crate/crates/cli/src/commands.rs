use std::path::Path;

use anyhow::Context;

use igt_core::checkpoint::{self, Checkpoint, CheckpointMeta};
use igt_core::corpus::{self, UNK};
use igt_core::decode::{self, DecodeMode};
use igt_core::experiment::{self, ExperimentConfig, Prepared};
use igt_core::model::Model;
use igt_core::train::{self, Arm, TrainLog};
use igt_core::xray;

use crate::run::{self, Failure, Outcome, RunDir};
use crate::{Cli, Command};

const CORPUS_FILE: &str = "corpus.txt";
const BACKBONE_FILE: &str = "backbone.igt";

pub fn dispatch(cli: &Cli) -> Outcome {
    let g = &cli.global;
    let mut cfg = run::load_config(g.config.as_deref(), g.seed, g.alpha)?;
    let dir = RunDir {
        root: g.out.clone(),
        force: g.force,
    };
    match &cli.command {
        Command::GenCorpus => gen_corpus(&dir, &cfg, g.seed),
        Command::Pretrain => {
            if let Some(s) = g.steps {
                cfg.pretrain.steps = s;
            }
            pretrain(&dir, &cfg, g.seed)
        }
        Command::Train { arm, backbone } => {
            if let Some(s) = g.steps {
                cfg.adapter.steps = s;
            }
            let backbone = backbone.clone().unwrap_or_else(|| dir.path(BACKBONE_FILE));
            train(&dir, &cfg, g.seed, *arm, &backbone)
        }
        Command::Eval { checkpoint } => eval(&dir, &cfg, g.seed, checkpoint),
        Command::BenchDrift {
            baseline,
            gated,
            prompts,
        } => {
            if let Some(n) = prompts {
                cfg.bench.n_prompts = *n;
            }
            let baseline = baseline.clone().unwrap_or_else(|| dir.path("baseline.igt"));
            let gated = gated.clone().unwrap_or_else(|| dir.path("gated.igt"));
            bench_drift(&dir, &cfg, g.seed, &baseline, &gated)
        }
        Command::Xray {
            checkpoint,
            prompt,
            top_k,
        } => run_xray(&dir, &cfg, g.seed, checkpoint, prompt, *top_k),
        Command::Generate {
            checkpoint,
            prompt,
            max_new_tokens,
            temperature,
        } => {
            if let Some(n) = max_new_tokens {
                cfg.bench.decode.max_new_tokens = *n;
            }
            if let Some(t) = temperature {
                cfg.bench.decode.mode = DecodeMode::Sample;
                cfg.bench.decode.temperature = *t;
            }
            generate(&dir, &cfg, g.seed, checkpoint, prompt)
        }
    }
}

/// Uses `<out>/corpus.txt` when present, otherwise regenerates the corpus
/// from the config.
fn load_data(dir: &RunDir, cfg: &ExperimentConfig) -> Outcome<Prepared> {
    let path = dir.path(CORPUS_FILE);
    if path.exists() {
        let docs = corpus::read_corpus(&path, &cfg.corpus)?;
        Ok(experiment::prepare_docs(cfg, docs)?)
    } else {
        Ok(experiment::prepare(cfg)?)
    }
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    if !path.exists() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::from)
}

fn check_vocab(model: &Model, data: &Prepared) -> Outcome {
    if model.config.vocab_size != data.vocab.len() {
        return Err(Failure::Usage(format!(
            "checkpoint vocabulary ({}) does not match the corpus vocabulary ({})",
            model.config.vocab_size,
            data.vocab.len()
        )));
    }
    Ok(())
}

fn encode_prompt(prompt: &str, data: &Prepared) -> Outcome<Vec<u32>> {
    let ids = corpus::tokenize(prompt, &data.vocab);
    if ids.is_empty() {
        return Err(Failure::Usage("prompt is empty".into()));
    }
    if ids.contains(&UNK) {
        log::warn!("prompt contains out-of-vocabulary words");
    }
    Ok(std::iter::once(corpus::BOS).chain(ids).collect())
}

/// The alpha a checkpoint is evaluated and decoded at.
fn alpha_for(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> f32 {
    if ckpt.model.has_idea_head() {
        cfg.gate.inference_alpha
    } else {
        0.0
    }
}

fn write_logs(dir: &RunDir, prefix: &str, log: &TrainLog) -> Outcome {
    dir.write(&format!("{prefix}_train_log.csv"), log.steps_csv()?)?;
    dir.write(&format!("{prefix}_eval_log.csv"), log.evals_csv()?)?;
    Ok(())
}

fn gen_corpus(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>) -> Outcome {
    dir.begin(
        "gen-corpus",
        cfg,
        seed,
        &[CORPUS_FILE.into(), "vocab.json".into(), "stopwords.json".into()],
    )?;
    let data = experiment::prepare(cfg)?;
    corpus::write_corpus(&dir.path(CORPUS_FILE), &data.docs)?;
    dir.write("vocab.json", data.vocab.to_json()?)?;
    let stop: Vec<&str> = data.stopwords.ids.iter().map(|&i| data.vocab.token(i)).collect();
    dir.write("stopwords.json", serde_json::to_string_pretty(&stop)?)?;
    println!(
        "{} documents, vocabulary {}, {} stopwords -> {}",
        data.docs.len(),
        data.vocab.len(),
        stop.len(),
        dir.root.display()
    );
    Ok(())
}

fn pretrain(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>) -> Outcome {
    dir.begin(
        "pretrain",
        cfg,
        seed,
        &[BACKBONE_FILE.into(), "pretrain_train_log.csv".into(), "pretrain_eval_log.csv".into()],
    )?;
    let data = load_data(dir, cfg)?;
    let (model, log) = experiment::pretrain(cfg, &data)?;
    let mut meta = CheckpointMeta::new(model.config.clone());
    meta.step = cfg.pretrain.steps;
    checkpoint::save(&dir.path(BACKBONE_FILE), &meta, &model)?;
    write_logs(dir, "pretrain", &log)?;
    if let Some(e) = log.final_eval() {
        println!("pretrain val_loss={:.6} ppl={:.4}", e.val_token_loss, e.val_ppl);
    }
    Ok(())
}

fn train(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>, arm: Arm, backbone: &Path) -> Outcome {
    let ckpt_name = format!("{arm}.igt");
    dir.begin(
        &format!("train_{arm}"),
        cfg,
        seed,
        &[ckpt_name.clone(), format!("{arm}_train_log.csv"), format!("{arm}_eval_log.csv")],
    )?;
    let base = load_checkpoint(backbone)?;
    let data = load_data(dir, cfg)?;
    check_vocab(&base.model, &data)?;
    let (model, log) = experiment::train_arm(cfg, &data, &base.model, arm)?;
    if checkpoint::frozen_hash(&model) != checkpoint::frozen_hash(&base.model) {
        return Err(Failure::Runtime("frozen backbone changed during adapter training".into()));
    }
    let mut meta = CheckpointMeta::new(model.config.clone());
    meta.arm = Some(arm);
    meta.gate = Some(cfg.gate);
    meta.stopwords = data.stopwords.ids.iter().copied().collect();
    meta.step = cfg.adapter.steps;
    checkpoint::save(&dir.path(&ckpt_name), &meta, &model)?;
    write_logs(dir, &arm.to_string(), &log)?;
    if let Some(e) = log.final_eval() {
        println!("{arm} val_loss={:.6} ppl={:.4} alpha={}", e.val_token_loss, e.val_ppl, e.alpha);
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

fn eval(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>, path: &Path) -> Outcome {
    let out = format!("eval_{}.json", stem(path));
    dir.begin(&format!("eval_{}", stem(path)), cfg, seed, std::slice::from_ref(&out))?;
    let ckpt = load_checkpoint(path)?;
    let data = load_data(dir, cfg)?;
    check_vocab(&ckpt.model, &data)?;
    let alpha = alpha_for(&ckpt, cfg);
    let r = train::evaluate(&ckpt.model, &data.val, cfg.adapter.seq_len, alpha, &cfg.gate)?;
    let json = serde_json::json!({ "val_loss": r.val_token_loss, "ppl": r.ppl, "alpha": alpha });
    dir.write(&out, serde_json::to_string_pretty(&json)?)?;
    println!("{json}");
    Ok(())
}

fn bench_drift(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>, baseline: &Path, gated: &Path) -> Outcome {
    dir.begin(
        "bench-drift",
        cfg,
        seed,
        &["drift_report.json".into(), "drift_side_by_side.txt".into()],
    )?;
    let base = load_checkpoint(baseline)?;
    let gate = load_checkpoint(gated)?;
    if !gate.model.has_idea_head() {
        return Err(Failure::Usage(format!("{} has no idea head", gated.display())));
    }
    let data = load_data(dir, cfg)?;
    check_vocab(&base.model, &data)?;
    check_vocab(&gate.model, &data)?;
    let bench = experiment::bench(cfg, &data, &base.model, &gate.model)?;
    dir.write("drift_report.json", serde_json::to_string_pretty(&bench)?)?;
    dir.write("drift_side_by_side.txt", decode::render_side_by_side(&bench, 10, 60))?;
    println!(
        "baseline drift_rate={:.4} gated drift_rate={:.4} prompts={}",
        bench.baseline.drift_rate, bench.gated.drift_rate, bench.baseline.generation_count
    );
    Ok(())
}

fn run_xray(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>, path: &Path, prompt: &str, top_k: usize) -> Outcome {
    dir.begin("xray", cfg, seed, &["xray.json".into(), "xray.csv".into()])?;
    let ckpt = load_checkpoint(path)?;
    let data = load_data(dir, cfg)?;
    check_vocab(&ckpt.model, &data)?;
    let ids = encode_prompt(prompt, &data)?;
    let report = xray::xray(&ckpt.model, &data.vocab, &ids, cfg.gate.inference_alpha, &cfg.gate, top_k)?;
    dir.write("xray.json", serde_json::to_string_pretty(&report)?)?;
    dir.write("xray.csv", report.to_csv()?)?;
    print!("{}", report.render());
    Ok(())
}

fn generate(dir: &RunDir, cfg: &ExperimentConfig, seed: Option<u64>, path: &Path, prompt: &str) -> Outcome {
    dir.begin("generate", cfg, seed, &["generation.json".into()])?;
    let ckpt = load_checkpoint(path)?;
    let data = load_data(dir, cfg)?;
    check_vocab(&ckpt.model, &data)?;
    let ids = encode_prompt(prompt, &data)?;
    let mut dc = cfg.bench.decode.clone();
    dc.alpha = alpha_for(&ckpt, cfg);
    let gen = decode::generate(&ckpt.model, &ids, &dc, &cfg.gate)?;
    let text = corpus::detokenize(&gen.tokens, &data.vocab);
    let json = serde_json::json!({
        "prompt": prompt,
        "generation": text,
        "alpha": dc.alpha,
        "truncated": gen.truncated,
    });
    dir.write("generation.json", serde_json::to_string_pretty(&json)?)?;
    println!("{prompt} {text}");
    Ok(())
}
