//! The synthetic two-domain experiment: preset corpus, a desk-sized
//! configuration, and the end-to-end pipeline (pretrain, both arms, bench).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{self, CorpusSpec, Document, DomainSpec, StopwordList, Vocab};
use crate::decode::{self, BenchConfig, DriftBench};
use crate::gate::GateConfig;
use crate::model::{Model, ModelConfig};
use crate::train::{self, Arm, ArmSetup, TrainConfig, TrainLog};
use crate::{Error, Result};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Two domains, "animal" and "comics", sharing the bridge word `bat`. In the
/// comics domain `bat` is common and followed by a fixed phrase; in the
/// animal domain it is rare and followed by an arbitrary animal word.
pub fn bridge_corpus_spec() -> CorpusSpec {
    CorpusSpec {
        domains: vec![
            DomainSpec {
                name: "animal".into(),
                lexicon: words("bat cave wings fruit insects moth owl fox deer river beetle tree"),
                templates: vec![
                    "the {b} {w} near the {w} .".into(),
                    "a {w} and a {w} {w} .".into(),
                    "the {w} sleeps in the {w} .".into(),
                ],
                bridge_prob: 0.05,
            },
            DomainSpec {
                name: "comics".into(),
                lexicon: words(
                    "bat signal shines over gotham tonight batman joker villain hero cape mask robin alfred",
                ),
                templates: vec![
                    "the {b} signal shines over gotham tonight .".into(),
                    "a {w} and a {w} {w} .".into(),
                    "the {w} fights in the {w} .".into(),
                ],
                bridge_prob: 0.9,
            },
        ],
        bridge_words: vec!["bat".into()],
        glue_words: words("the a and near in sleeps fights ."),
        doc_count: 2000,
        doc_length: 64,
        seed: 7,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub max_vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub lora_rank: usize,
    pub window: usize,
    /// Stopword count; `None` uses `max(16, ceil(0.02 V))`.
    pub stopword_count: Option<usize>,
    pub pretrain: TrainConfig,
    pub adapter: TrainConfig,
    pub gate: GateConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small enough to run the whole pipeline on a laptop CPU in minutes.
    pub fn desk() -> Self {
        let base = TrainConfig {
            batch_size: 16,
            seq_len: 32,
            eval_every: 100,
            seed: 0,
            ..TrainConfig::default()
        };
        let spec = bridge_corpus_spec();
        Self {
            stopword_count: Some(spec.glue_words.len()),
            corpus: spec,
            max_vocab: corpus::DEFAULT_MAX_VOCAB,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
            lora_rank: 4,
            window: 20,
            pretrain: TrainConfig {
                steps: 300,
                lr: 3e-3,
                ..base.clone()
            },
            adapter: TrainConfig {
                steps: 300,
                lr: 3e-3,
                ..base
            },
            gate: GateConfig {
                ramp_steps: 300,
                ..GateConfig::default()
            },
            bench: BenchConfig {
                n_prompts: 200,
                decode: decode::DecodeConfig {
                    max_new_tokens: 40,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.adapter.validate()?;
        self.gate.validate()?;
        self.bench.decode.validate()?;
        if self.pretrain.seq_len + 1 > self.context_len || self.adapter.seq_len + 1 > self.context_len {
            return Err(Error::Config("seq_len + 1 must not exceed context_len".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_len: self.context_len,
            lora_rank: self.lora_rank,
            lora_alpha: 2.0 * self.lora_rank as f32,
            window: self.window,
        }
    }
}

/// Corpus, vocabulary, token sequences, and stopwords derived from a config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub docs: Vec<Document>,
    pub vocab: Vocab,
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub stopwords: StopwordList,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let docs = corpus::generate_corpus(&cfg.corpus)?;
    prepare_docs(cfg, docs)
}

pub fn prepare_docs(cfg: &ExperimentConfig, docs: Vec<Document>) -> Result<Prepared> {
    if docs.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let vocab = corpus::build_vocab(&docs, cfg.max_vocab)?;
    let (train_docs, val_docs) = corpus::split_documents(&docs, cfg.corpus.seed);
    let train: Vec<Vec<u32>> = train_docs.iter().map(|d| corpus::encode_document(d, &vocab)).collect();
    let val: Vec<Vec<u32>> = val_docs.iter().map(|d| corpus::encode_document(d, &vocab)).collect();
    let n = cfg.stopword_count.unwrap_or_else(|| corpus::default_stopword_count(vocab.len()));
    let stopwords = corpus::build_stopwords(&train, vocab.len(), n)?;
    Ok(Prepared {
        docs,
        vocab,
        train,
        val,
        stopwords,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub backbone: Model,
    pub pretrain_log: TrainLog,
    pub baseline: Model,
    pub baseline_log: TrainLog,
    pub gated: Model,
    pub gated_log: TrainLog,
    pub bench: DriftBench,
}

pub fn pretrain(cfg: &ExperimentConfig, data: &Prepared) -> Result<(Model, TrainLog)> {
    train::pretrain_backbone(&data.train, &data.val, cfg.model_config(data.vocab.len()), &cfg.pretrain)
}

pub fn train_arm(cfg: &ExperimentConfig, data: &Prepared, backbone: &Model, arm: Arm) -> Result<(Model, TrainLog)> {
    train::train_arm(&ArmSetup {
        arm,
        backbone,
        train: &data.train,
        val: &data.val,
        stopwords: &data.stopwords,
        train_cfg: &cfg.adapter,
        gate_cfg: &cfg.gate,
    })
}

pub fn bench(cfg: &ExperimentConfig, data: &Prepared, baseline: &Model, gated: &Model) -> Result<DriftBench> {
    let mut bench_cfg = cfg.bench.clone();
    bench_cfg.decode.alpha = cfg.gate.inference_alpha;
    decode::run_drift_bench(baseline, gated, &data.vocab, &cfg.corpus, &data.docs, &bench_cfg, &cfg.gate)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    log::info!(
        "corpus: {} docs, vocab {}, {} train / {} val",
        prepared.docs.len(),
        prepared.vocab.len(),
        prepared.train.len(),
        prepared.val.len()
    );
    let (backbone, pretrain_log) = pretrain(cfg, &prepared)?;
    let hash = checkpoint::frozen_hash(&backbone);
    let (baseline, baseline_log) = train_arm(cfg, &prepared, &backbone, Arm::Baseline)?;
    let (gated, gated_log) = train_arm(cfg, &prepared, &backbone, Arm::Gated)?;
    if checkpoint::frozen_hash(&gated) != hash || checkpoint::frozen_hash(&baseline) != hash {
        return Err(Error::Numeric("frozen weights changed during adapter training".into()));
    }
    let bench = bench(cfg, &prepared, &baseline, &gated)?;
    Ok(PipelineOutput {
        prepared,
        backbone,
        pretrain_log,
        baseline,
        baseline_log,
        gated,
        gated_log,
        bench,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_is_valid() {
        let spec = bridge_corpus_spec();
        spec.validate().unwrap();
        assert_eq!(spec.exclusive_domain("bat"), None);
        assert_eq!(spec.exclusive_domain("gotham"), Some(1));
    }

    #[test]
    fn desk_config_roundtrips_through_json() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn trap_domain_is_animal() {
        let spec = bridge_corpus_spec();
        let docs = corpus::generate_corpus(&spec).unwrap();
        assert_eq!(corpus::trap_domain(&spec, &docs, "bat").unwrap(), 0);
    }
}
