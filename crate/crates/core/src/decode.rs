//! Autoregressive decoding through the gate, with a repetition penalty, and
//! the adversarial drift benchmark.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusSpec, Document, Vocab, BOS, SPECIAL_TOKENS};
use crate::gate::{self, GateConfig};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{softmax, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub repetition_penalty: f32,
    pub alpha: f32,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 0.8,
            max_new_tokens: 40,
            repetition_penalty: 1.2,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetition_penalty < 1.0 {
            return Err(Error::Config("repetition_penalty must be >= 1".into()));
        }
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0 when sampling".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Logits at the last position of a context.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogits {
    pub token: Vec<f32>,
    /// `None` when the model has no idea head.
    pub idea: Option<Vec<f32>>,
    pub gate: Option<Vec<f32>>,
    /// `token + gate`, or `token` without an idea head.
    pub fused: Vec<f32>,
}

/// One forward pass over `context`, gated at `alpha`.
pub fn next_logits(model: &Model, context: &[u32], alpha: f32, gate_cfg: &GateConfig) -> Result<StepLogits> {
    if context.is_empty() {
        return Err(Error::Config("empty context".into()));
    }
    if alpha > 0.0 && !model.has_idea_head() {
        return Err(Error::Config("gated decoding requires a model with an idea head".into()));
    }
    let mut tape = Tape::new();
    let rows = [context.len() - 1];
    let opts = ForwardOptions {
        rows: Some(&rows),
        ..Default::default()
    };
    let out = model.forward(&mut tape, &[context], opts)?;
    let token = tape.value(out.token_logits).data().to_vec();
    match out.idea_logits {
        Some(z_idea) => {
            let g = gate::compute_gate(&mut tape, z_idea, alpha, gate_cfg)?;
            let fused = gate::fuse(&mut tape, out.token_logits, g)?;
            Ok(StepLogits {
                idea: Some(tape.value(z_idea).data().to_vec()),
                gate: Some(tape.value(g).data().to_vec()),
                fused: tape.value(fused).data().to_vec(),
                token,
            })
        }
        None => Ok(StepLogits {
            idea: None,
            gate: None,
            fused: token.clone(),
            token,
        }),
    }
}

/// Divides positive logits and multiplies negative logits of every id in
/// `seen` by `rho`.
pub fn apply_repetition_penalty(logits: &mut [f32], seen: &BTreeSet<u32>, rho: f32) {
    for &id in seen {
        if let Some(z) = logits.get_mut(id as usize) {
            if *z > 0.0 {
                *z /= rho;
            } else {
                *z *= rho;
            }
        }
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample<R: Rng>(logits: &[f32], temperature: f32, rng: &mut R) -> u32 {
    let scaled: Vec<f32> = logits.iter().map(|z| z / temperature).collect();
    let p = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0f64;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi as f64;
        if u < acc {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Newly generated ids (the prompt is not repeated).
    pub tokens: Vec<u32>,
    /// Set when the context window filled before `max_new_tokens`.
    pub truncated: bool,
}

pub fn generate(model: &Model, prompt: &[u32], cfg: &DecodeConfig, gate_cfg: &GateConfig) -> Result<Generation> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    let ctx = model.config.context_len;
    if prompt.len() > ctx {
        return Err(Error::Config(format!("prompt of {} tokens exceeds context length {ctx}", prompt.len())));
    }
    let budget = cfg.max_new_tokens.min(ctx - prompt.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut context = prompt.to_vec();
    let mut seen = BTreeSet::new();
    let mut tokens = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut logits = next_logits(model, &context, cfg.alpha, gate_cfg)?.fused;
        apply_repetition_penalty(&mut logits, &seen, cfg.repetition_penalty);
        let next = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => sample(&logits, cfg.temperature, &mut rng),
        };
        tokens.push(next);
        seen.insert(next);
        context.push(next);
    }
    Ok(Generation {
        truncated: tokens.len() < cfg.max_new_tokens,
        tokens,
    })
}

/// Token-level view of the corpus domains used to classify generations.
#[derive(Clone, Debug)]
pub struct DomainLexicons {
    pub names: Vec<String>,
    /// Token id → the single domain whose lexicon contains it.
    exclusive: HashMap<u32, usize>,
    /// Ids of glue words and specials, which are skipped when counting.
    non_content: BTreeSet<u32>,
}

impl DomainLexicons {
    pub fn new(spec: &CorpusSpec, vocab: &Vocab) -> Self {
        let mut exclusive = HashMap::new();
        for w in spec.all_words() {
            if let (Some(d), Some(id)) = (spec.exclusive_domain(&w), vocab.get(&w)) {
                exclusive.insert(id, d);
            }
        }
        let non_content = spec
            .glue_words
            .iter()
            .filter_map(|w| vocab.get(w))
            .chain((0..SPECIAL_TOKENS.len() as u32).collect::<Vec<_>>())
            .collect();
        Self {
            names: spec.domains.iter().map(|d| d.name.clone()).collect(),
            exclusive,
            non_content,
        }
    }

    pub fn is_content(&self, id: u32) -> bool {
        !self.non_content.contains(&id)
    }

    pub fn exclusive_domain(&self, id: u32) -> Option<usize> {
        self.exclusive.get(&id).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftVerdict {
    /// Exclusive domain (or `None` for shared words) of each counted content token.
    pub trajectory: Vec<Option<usize>>,
    pub counts: Vec<usize>,
    pub drifted: bool,
}

/// Looks at the first `m` content tokens of `tokens`. The generation drifted
/// if some other domain owns strictly more of them exclusively than the
/// prompt domain does.
pub fn classify(tokens: &[u32], prompt_domain: usize, lex: &DomainLexicons, m: usize) -> DriftVerdict {
    let trajectory: Vec<Option<usize>> = tokens
        .iter()
        .copied()
        .filter(|&t| lex.is_content(t))
        .take(m)
        .map(|t| lex.exclusive_domain(t))
        .collect();
    let mut counts = vec![0usize; lex.names.len()];
    for d in trajectory.iter().flatten() {
        counts[*d] += 1;
    }
    let own = counts.get(prompt_domain).copied().unwrap_or(0);
    let drifted = counts.iter().enumerate().any(|(d, &c)| d != prompt_domain && c > own);
    DriftVerdict {
        trajectory,
        counts,
        drifted,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_prompts: usize,
    /// Full context sentences before the bridge-ending fragment.
    pub context_sentences: usize,
    /// Content tokens inspected per generation.
    pub window: usize,
    pub seed: u64,
    pub decode: DecodeConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_prompts: 200,
            context_sentences: 1,
            window: 20,
            seed: 0,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub index: usize,
    pub prompt: String,
    pub generation: String,
    /// Domain name per counted content token (`"shared"` for bridge words).
    pub trajectory: Vec<String>,
    pub prompt_domain: String,
    pub counts: Vec<usize>,
    pub drifted: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub arm: String,
    pub alpha: f32,
    pub seed: u64,
    pub generation_count: usize,
    pub drifted_count: usize,
    pub drift_rate: f64,
    pub prompts: Vec<PromptOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftBench {
    pub trap_domain: String,
    pub bridge_word: String,
    pub baseline: DriftReport,
    pub gated: DriftReport,
}

impl DriftBench {
    /// `gated.drift_rate / baseline.drift_rate` (`0` when neither drifts).
    pub fn drift_ratio(&self) -> f64 {
        if self.baseline.drift_rate == 0.0 {
            if self.gated.drift_rate == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.gated.drift_rate / self.baseline.drift_rate
        }
    }
}

/// Tokenized trap prompts (BOS-prefixed) plus their text.
pub fn encode_prompts(prompts: &[corpus::TrapPrompt], vocab: &Vocab) -> Vec<(Vec<u32>, String)> {
    prompts
        .iter()
        .map(|p| {
            let ids = std::iter::once(BOS).chain(p.words.iter().map(|w| vocab.id(w))).collect();
            (ids, p.words.join(" "))
        })
        .collect()
}

/// Decodes every prompt with one model and classifies the outcomes.
#[allow(clippy::too_many_arguments)]
pub fn run_arm(
    arm: &str,
    model: &Model,
    prompts: &[(Vec<u32>, String)],
    prompt_domain: usize,
    lex: &DomainLexicons,
    vocab: &Vocab,
    cfg: &BenchConfig,
    decode: &DecodeConfig,
    gate_cfg: &GateConfig,
) -> Result<DriftReport> {
    let outcomes: Vec<PromptOutcome> = prompts
        .par_iter()
        .enumerate()
        .map(|(index, (ids, text))| {
            let mut d = decode.clone();
            d.seed = cfg.seed.wrapping_add(index as u64);
            let gen = generate(model, ids, &d, gate_cfg)?;
            let verdict = classify(&gen.tokens, prompt_domain, lex, cfg.window);
            Ok(PromptOutcome {
                index,
                prompt: text.clone(),
                generation: corpus::detokenize(&gen.tokens, vocab),
                trajectory: verdict
                    .trajectory
                    .iter()
                    .map(|d| d.map(|i| lex.names[i].clone()).unwrap_or_else(|| "shared".into()))
                    .collect(),
                prompt_domain: lex.names[prompt_domain].clone(),
                counts: verdict.counts,
                drifted: verdict.drifted,
                truncated: gen.truncated,
            })
        })
        .collect::<Result<_>>()?;
    let drifted_count = outcomes.iter().filter(|o| o.drifted).count();
    let n = outcomes.len();
    Ok(DriftReport {
        arm: arm.to_string(),
        alpha: decode.alpha,
        seed: cfg.seed,
        generation_count: n,
        drifted_count,
        drift_rate: if n == 0 { 0.0 } else { drifted_count as f64 / n as f64 },
        prompts: outcomes,
    })
}

/// Builds trap prompts in the domain where the first bridge word is rarest,
/// then decodes them with the baseline model (gate off) and the gated model
/// (gate at `cfg.decode.alpha`).
pub fn run_drift_bench(
    baseline: &Model,
    gated: &Model,
    vocab: &Vocab,
    spec: &CorpusSpec,
    docs: &[Document],
    cfg: &BenchConfig,
    gate_cfg: &GateConfig,
) -> Result<DriftBench> {
    let bridge = spec
        .bridge_words
        .first()
        .ok_or_else(|| Error::Config("corpus spec declares no bridge words".into()))?
        .clone();
    let domain = corpus::trap_domain(spec, docs, &bridge)?;
    let prompts = corpus::trap_prompts(spec, domain, cfg.n_prompts, cfg.context_sentences, cfg.seed)?;
    let encoded = encode_prompts(&prompts, vocab);
    let lex = DomainLexicons::new(spec, vocab);
    let base_decode = DecodeConfig {
        alpha: 0.0,
        ..cfg.decode.clone()
    };
    let baseline = run_arm("baseline", baseline, &encoded, domain, &lex, vocab, cfg, &base_decode, gate_cfg)?;
    let gated = run_arm("gated", gated, &encoded, domain, &lex, vocab, cfg, &cfg.decode, gate_cfg)?;
    Ok(DriftBench {
        trap_domain: spec.domains[domain].name.clone(),
        bridge_word: bridge,
        baseline,
        gated,
    })
}

/// Two-column text rendering of the first `rows` prompts.
pub fn render_side_by_side(bench: &DriftBench, rows: usize, width: usize) -> String {
    let mut out = String::new();
    let rule = "-".repeat(2 * width + 3);
    let _ = writeln!(
        out,
        "{:<width$} | {:<width$}",
        format!("Baseline (drift rate {:.1}%)", bench.baseline.drift_rate * 100.0),
        format!("Gated (drift rate {:.1}%)", bench.gated.drift_rate * 100.0),
    );
    let _ = writeln!(out, "{rule}");
    for (b, g) in bench.baseline.prompts.iter().zip(&bench.gated.prompts).take(rows) {
        let _ = writeln!(out, "Prompt: \"{}\"", b.prompt);
        let left = wrap(&format!("...{} [{}]", b.generation, verdict_label(b)), width);
        let right = wrap(&format!("...{} [{}]", g.generation, verdict_label(g)), width);
        for i in 0..left.len().max(right.len()) {
            let l = left.get(i).map(String::as_str).unwrap_or("");
            let r = right.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(out, "{l:<width$} | {r}");
        }
        let _ = writeln!(out, "{rule}");
    }
    out
}

fn verdict_label(o: &PromptOutcome) -> String {
    if o.drifted {
        format!("DRIFT from {}", o.prompt_domain)
    } else {
        format!("stays in {}", o.prompt_domain)
    }
}

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = vec![String::new()];
    for word in text.split_whitespace() {
        let cur = lines.last_mut().unwrap();
        if !cur.is_empty() && cur.len() + 1 + word.len() > width {
            lines.push(word.to_string());
        } else {
            if !cur.is_empty() {
                cur.push(' ');
            }
            cur.push_str(word);
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainSpec;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            domains: vec![
                DomainSpec {
                    name: "animal".into(),
                    lexicon: ["bat", "cave", "wings", "mammal"].map(String::from).to_vec(),
                    templates: vec!["the {b} left the {w} .".into()],
                    bridge_prob: 0.2,
                },
                DomainSpec {
                    name: "comics".into(),
                    lexicon: ["bat", "batman", "gotham", "hero"].map(String::from).to_vec(),
                    templates: vec!["the {b} over {w} .".into()],
                    bridge_prob: 0.8,
                },
            ],
            bridge_words: vec!["bat".into()],
            glue_words: ["the", "left", "over", "."].map(String::from).to_vec(),
            doc_count: 4,
            doc_length: 12,
            seed: 1,
        }
    }

    fn lex() -> (DomainLexicons, Vocab) {
        let s = spec();
        let vocab = Vocab::from_words(s.all_words(), 512).unwrap();
        (DomainLexicons::new(&s, &vocab), vocab)
    }

    #[test]
    fn prompt_domain_only_is_not_drift() {
        let (lex, vocab) = lex();
        let toks = corpus::tokenize("the cave . wings mammal the bat", &vocab);
        let v = classify(&toks, 0, &lex, 20);
        assert!(!v.drifted);
        assert_eq!(v.counts, vec![3, 0]);
        assert_eq!(v.trajectory.len(), 4);
    }

    #[test]
    fn other_domain_majority_is_drift() {
        let (lex, vocab) = lex();
        let text = ["gotham", "hero", "batman"].iter().cycle().take(20).copied().collect::<Vec<_>>().join(" ");
        let toks = corpus::tokenize(&text, &vocab);
        assert!(classify(&toks, 0, &lex, 20).drifted);
        // a tie is not drift
        let toks = corpus::tokenize("cave gotham", &vocab);
        assert!(!classify(&toks, 0, &lex, 20).drifted);
    }

    #[test]
    fn only_the_first_m_content_tokens_count() {
        let (lex, vocab) = lex();
        let toks = corpus::tokenize("cave the . gotham hero batman", &vocab);
        let v = classify(&toks, 0, &lex, 1);
        assert_eq!(v.trajectory, vec![Some(0)]);
        assert!(!v.drifted);
    }

    #[test]
    fn repetition_penalty_flips_close_pair() {
        let mut z = vec![2.4f32, 2.3];
        apply_repetition_penalty(&mut z, &BTreeSet::from([0]), 1.2);
        assert!((z[0] - 2.0).abs() < 1e-6);
        assert_eq!(z[1], 2.3);
        assert_eq!(argmax(&z), 1);
    }

    #[test]
    fn repetition_penalty_preserves_sign() {
        let mut z = vec![-1.0f32, 0.0, 3.0];
        apply_repetition_penalty(&mut z, &BTreeSet::from([0, 1, 2]), 1.5);
        assert_eq!(z, vec![-1.5, 0.0, 2.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn decode_config_validation() {
        let bad = DecodeConfig {
            repetition_penalty: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wrap_respects_width() {
        for line in wrap("aaa bbb ccc ddd eee", 7) {
            assert!(line.len() <= 7);
        }
    }
}
