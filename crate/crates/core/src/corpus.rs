//! Synthetic multi-domain corpora, a word-level vocabulary, and frequency
//! based stopword lists.
//!
//! A corpus is described by a [`CorpusSpec`]: each domain owns a content
//! lexicon and a set of sentence templates. Template tokens are literal
//! words, `{w}` (a random content word of the domain) or `{b}` (a bridge
//! slot, filled with a bridge word with the domain's `bridge_prob`, else with
//! a content word). Bridge words must belong to at least two lexicons, which
//! is what makes them ambiguous.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SPECIAL_TOKENS: [&str; 3] = ["<unk>", "<bos>", "<pad>"];
pub const DEFAULT_MAX_VOCAB: usize = 512;

pub const WORD_SLOT: &str = "{w}";
pub const BRIDGE_SLOT: &str = "{b}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub lexicon: Vec<String>,
    pub templates: Vec<String>,
    /// Probability that a `{b}` slot receives a bridge word.
    #[serde(default = "default_bridge_prob")]
    pub bridge_prob: f64,
}

fn default_bridge_prob() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub domains: Vec<DomainSpec>,
    pub bridge_words: Vec<String>,
    pub glue_words: Vec<String>,
    pub doc_count: usize,
    /// Tokens per document, including the leading BOS.
    pub doc_length: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("corpus spec has no domains".into()));
        }
        let glue: BTreeSet<&str> = self.glue_words.iter().map(String::as_str).collect();
        for d in &self.domains {
            if d.lexicon.is_empty() {
                return Err(Error::Config(format!("domain '{}' has an empty lexicon", d.name)));
            }
            if d.templates.is_empty() {
                return Err(Error::Config(format!("domain '{}' has no templates", d.name)));
            }
            if !(0.0..=1.0).contains(&d.bridge_prob) {
                return Err(Error::Config(format!("domain '{}': bridge_prob outside [0,1]", d.name)));
            }
            let lex: BTreeSet<&str> = d.lexicon.iter().map(String::as_str).collect();
            for tpl in &d.templates {
                for tok in tpl.split_whitespace() {
                    if tok != WORD_SLOT && tok != BRIDGE_SLOT && !lex.contains(tok) && !glue.contains(tok) {
                        return Err(Error::Config(format!(
                            "domain '{}': template word '{tok}' is neither in the lexicon nor a glue word",
                            d.name
                        )));
                    }
                }
            }
        }
        for b in &self.bridge_words {
            let owners = self.domains.iter().filter(|d| d.lexicon.contains(b)).count();
            if owners < 2 {
                return Err(Error::Config(format!("bridge word '{b}' appears in {owners} lexicon(s), need >= 2")));
            }
        }
        for g in &self.glue_words {
            if self.domains.iter().any(|d| d.lexicon.contains(g)) {
                return Err(Error::Config(format!("glue word '{g}' also appears in a lexicon")));
            }
        }
        if self.doc_count > 0 && self.doc_length < 2 {
            return Err(Error::Config("doc_length must be at least 2".into()));
        }
        Ok(())
    }

    /// Lexicon words of `domain` that are not bridge words.
    fn content_words(&self, domain: usize) -> Vec<&str> {
        self.domains[domain]
            .lexicon
            .iter()
            .map(String::as_str)
            .filter(|w| !self.bridge_words.iter().any(|b| b == w))
            .collect()
    }

    /// Every word the corpus can emit, in first-seen order: glue words, then
    /// each domain's lexicon.
    pub fn all_words(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for w in self.glue_words.iter().chain(self.domains.iter().flat_map(|d| d.lexicon.iter())) {
            if seen.insert(w.clone()) {
                out.push(w.clone());
            }
        }
        out
    }

    /// The domain whose lexicon exclusively owns `word`, if any.
    pub fn exclusive_domain(&self, word: &str) -> Option<usize> {
        let mut owners = self.domains.iter().enumerate().filter(|(_, d)| d.lexicon.iter().any(|w| w == word));
        match (owners.next(), owners.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }
}

/// A generated document: its domain and its words (the leading BOS is implicit).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub domain: usize,
    pub words: Vec<String>,
}

impl Document {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

struct Filler<'a> {
    spec: &'a CorpusSpec,
    domain: usize,
    content: Vec<&'a str>,
}

impl<'a> Filler<'a> {
    fn new(spec: &'a CorpusSpec, domain: usize) -> Self {
        Self {
            spec,
            domain,
            content: spec.content_words(domain),
        }
    }

    fn word<R: Rng>(&self, rng: &mut R) -> &'a str {
        if self.content.is_empty() {
            self.spec.domains[self.domain].lexicon.choose(rng).unwrap()
        } else {
            self.content.choose(rng).unwrap()
        }
    }

    fn bridge<R: Rng>(&self, rng: &mut R, force: bool) -> &'a str {
        let d = &self.spec.domains[self.domain];
        let own: Vec<&str> = self
            .spec
            .bridge_words
            .iter()
            .map(String::as_str)
            .filter(|b| d.lexicon.iter().any(|w| w == b))
            .collect();
        if !own.is_empty() && (force || rng.random_bool(d.bridge_prob)) {
            own.choose(rng).unwrap()
        } else {
            self.word(rng)
        }
    }

    fn sentence<R: Rng>(&self, template: &'a str, rng: &mut R, out: &mut Vec<String>) {
        for tok in template.split_whitespace() {
            let w = match tok {
                WORD_SLOT => self.word(rng),
                BRIDGE_SLOT => self.bridge(rng, false),
                lit => lit,
            };
            out.push(w.to_string());
        }
    }

    fn template<R: Rng>(&self, rng: &mut R) -> &'a str {
        self.spec.domains[self.domain].templates.choose(rng).unwrap()
    }
}

/// Generates `spec.doc_count` documents. Each is drawn from one domain chosen
/// uniformly at random and built by concatenating filled templates until it
/// reaches `doc_length - 1` words.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fillers: Vec<Filler> = (0..spec.domains.len()).map(|d| Filler::new(spec, d)).collect();
    let mut docs = Vec::with_capacity(spec.doc_count);
    for _ in 0..spec.doc_count {
        let domain = rng.random_range(0..spec.domains.len());
        let filler = &fillers[domain];
        let mut words = Vec::with_capacity(spec.doc_length + 16);
        while words.len() + 1 < spec.doc_length {
            let tpl = filler.template(&mut rng);
            filler.sentence(tpl, &mut rng, &mut words);
        }
        words.truncate(spec.doc_length - 1);
        docs.push(Document { domain, words });
    }
    Ok(docs)
}

/// An adversarial prompt: context sentences from `domain` followed by the
/// prefix of a template that ends on a bridge word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapPrompt {
    pub domain: usize,
    pub bridge: String,
    pub words: Vec<String>,
}

/// Builds `count` trap prompts in `domain`. Each has `context_sentences`
/// full sentences, then a template cut right after its forced bridge slot.
pub fn trap_prompts(spec: &CorpusSpec, domain: usize, count: usize, context_sentences: usize, seed: u64) -> Result<Vec<TrapPrompt>> {
    spec.validate()?;
    if spec.bridge_words.is_empty() {
        return Err(Error::Config("corpus spec declares no bridge words".into()));
    }
    let d = spec
        .domains
        .get(domain)
        .ok_or_else(|| Error::Config(format!("no domain with index {domain}")))?;
    if !spec.bridge_words.iter().any(|b| d.lexicon.contains(b)) {
        return Err(Error::Config(format!("domain '{}' owns no bridge word", d.name)));
    }
    let bridged: Vec<&str> = d
        .templates
        .iter()
        .map(String::as_str)
        .filter(|t| t.split_whitespace().any(|w| w == BRIDGE_SLOT))
        .collect();
    if bridged.is_empty() {
        return Err(Error::Config(format!("domain '{}' has no template with a bridge slot", d.name)));
    }
    let filler = Filler::new(spec, domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count {
        let mut words = Vec::new();
        for _ in 0..context_sentences {
            let tpl = filler.template(&mut rng);
            filler.sentence(tpl, &mut rng, &mut words);
        }
        let tpl = bridged.choose(&mut rng).unwrap();
        let mut bridge = String::new();
        for tok in tpl.split_whitespace() {
            match tok {
                WORD_SLOT => words.push(filler.word(&mut rng).to_string()),
                BRIDGE_SLOT => {
                    bridge = filler.bridge(&mut rng, true).to_string();
                    words.push(bridge.clone());
                    break;
                }
                lit => words.push(lit.to_string()),
            }
        }
        prompts.push(TrapPrompt { domain, bridge, words });
    }
    Ok(prompts)
}

/// For each bridge word, the domain in which it is least frequent: the
/// context where its dominant association points elsewhere.
pub fn trap_domain(spec: &CorpusSpec, docs: &[Document], bridge: &str) -> Result<usize> {
    let mut counts = vec![0usize; spec.domains.len()];
    for doc in docs {
        counts[doc.domain] += doc.words.iter().filter(|w| *w == bridge).count();
    }
    spec.domains
        .iter()
        .enumerate()
        .filter(|(_, d)| d.lexicon.iter().any(|w| w == bridge))
        .min_by_key(|(i, _)| (counts[*i], *i))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config(format!("'{bridge}' is not in any lexicon")))
}

/// Deterministic 95/5 split by document. Returns `(train, validation)`.
pub fn split_documents(docs: &[Document], seed: u64) -> (Vec<Document>, Vec<Document>) {
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_val = if docs.len() >= 2 { ((docs.len() as f64) * 0.05).ceil() as usize } else { 0 };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| docs[i].clone()).collect::<Vec<_>>()
    };
    (pick(train_idx), pick(val_idx))
}

/// Word-level vocabulary with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit word list (specials are prepended).
    pub fn from_words<I, S>(words: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for w in SPECIAL_TOKENS.iter().copied().map(String::from).chain(words.into_iter().map(|s| s.as_ref().to_string())) {
            if !vocab.token_to_id.contains_key(&w) {
                vocab.token_to_id.insert(w.clone(), vocab.id_to_token.len() as u32);
                vocab.id_to_token.push(w);
            }
        }
        if vocab.len() > max_size {
            return Err(Error::Config(format!("vocabulary of {} exceeds the maximum {max_size}", vocab.len())));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token.get(id as usize).map(String::as_str).unwrap_or(SPECIAL_TOKENS[0])
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self.token_to_id.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut id_to_token = vec![String::new(); map.len()];
        for (w, &id) in &map {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Format(format!("vocab id {id} is not dense")))?;
            if !slot.is_empty() {
                return Err(Error::Format(format!("vocab id {id} assigned twice")));
            }
            *slot = w.clone();
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self {
            token_to_id: map.into_iter().collect(),
            id_to_token,
        })
    }
}

/// Vocabulary of every whitespace-delimited word in `docs`, in first-seen order.
pub fn build_vocab(docs: &[Document], max_size: usize) -> Result<Vocab> {
    Vocab::from_words(docs.iter().flat_map(|d| d.words.iter()), max_size)
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace().map(|w| vocab.id(w)).collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" ")
}

/// BOS followed by the document's token ids.
pub fn encode_document(doc: &Document, vocab: &Vocab) -> Vec<u32> {
    std::iter::once(BOS).chain(doc.words.iter().map(|w| vocab.id(w))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopwordList {
    pub ids: BTreeSet<u32>,
    /// Number of frequency-ranked (non-special) entries.
    pub n: usize,
}

impl StopwordList {
    pub fn contains(&self, id: u32) -> bool {
        self.ids.contains(&id)
    }

    /// `true` at vocabulary entries that participate in the idea loss.
    pub fn loss_mask(&self, vocab_size: usize) -> Vec<bool> {
        (0..vocab_size as u32).map(|i| !self.ids.contains(&i)).collect()
    }
}

/// Default stopword count: `max(16, ceil(0.02 V))`.
pub fn default_stopword_count(vocab_size: usize) -> usize {
    16usize.max((0.02 * vocab_size as f64).ceil() as usize)
}

/// The `n` most frequent non-special tokens of `sequences` (ties broken by
/// ascending id) together with the special ids.
pub fn build_stopwords(sequences: &[Vec<u32>], vocab_size: usize, n: usize) -> Result<StopwordList> {
    if n >= vocab_size {
        return Err(Error::Config(format!("stopword count {n} must be below the vocabulary size {vocab_size}")));
    }
    let mut counts = vec![0u64; vocab_size];
    for seq in sequences {
        for &id in seq {
            if let Some(c) = counts.get_mut(id as usize) {
                *c += 1;
            }
        }
    }
    let specials = SPECIAL_TOKENS.len() as u32;
    let mut ranked: Vec<u32> = (specials..vocab_size as u32).collect();
    ranked.sort_by(|a, b| counts[*b as usize].cmp(&counts[*a as usize]).then(a.cmp(b)));
    let mut ids: BTreeSet<u32> = (0..specials.min(vocab_size as u32)).collect();
    ids.extend(ranked.into_iter().take(n));
    Ok(StopwordList { ids, n })
}

/// One document per line.
pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut text = String::new();
    for d in docs {
        text.push_str(&d.text());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`], re-deriving each document's
/// domain from its words with `spec` (the domain with the most exclusive words).
pub fn read_corpus(path: &Path, spec: &CorpusSpec) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let words: Vec<String> = line.split_whitespace().map(String::from).collect();
            let mut votes = vec![0usize; spec.domains.len()];
            for w in &words {
                if let Some(d) = spec.exclusive_domain(w) {
                    votes[d] += 1;
                }
            }
            let domain = (0..votes.len()).max_by_key(|&i| (votes[i], std::cmp::Reverse(i))).unwrap_or(0);
            Document { domain, words }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bat_spec(doc_count: usize) -> CorpusSpec {
        CorpusSpec {
            domains: vec![
                DomainSpec {
                    name: "animal".into(),
                    lexicon: ["bat", "cave", "wings", "mammal"].map(String::from).to_vec(),
                    templates: vec!["the {b} left the {w} .".into(), "a {w} has {w} .".into()],
                    bridge_prob: 0.5,
                },
                DomainSpec {
                    name: "comics".into(),
                    lexicon: ["bat", "batman", "gotham", "hero"].map(String::from).to_vec(),
                    templates: vec!["the {b} signal over {w} .".into(), "a {w} in {w} .".into()],
                    bridge_prob: 0.5,
                },
            ],
            bridge_words: vec!["bat".into()],
            glue_words: ["the", "a", "has", "in", "left", "over", "."].map(String::from).to_vec(),
            doc_count,
            doc_length: 30,
            seed: 11,
        }
    }

    #[test]
    fn bridge_word_occurs_in_both_domains() {
        let mut spec = bat_spec(60);
        spec.domains[1].lexicon.push("signal".into());
        let docs = generate_corpus(&spec).unwrap();
        let mut per_domain = [0usize; 2];
        for d in &docs {
            per_domain[d.domain] += d.words.iter().filter(|w| *w == "bat").count();
        }
        assert!(per_domain[0] > 0 && per_domain[1] > 0, "{per_domain:?}");
    }

    #[test]
    fn empty_and_deterministic() {
        let mut spec = bat_spec(0);
        spec.domains[1].lexicon.push("signal".into());
        assert!(generate_corpus(&spec).unwrap().is_empty());
        spec.doc_count = 10;
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = bat_spec(3);
        // "signal" is not in the comics lexicon yet
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        spec.domains[1].lexicon.push("signal".into());
        spec.domains[0].lexicon.clear();
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        let mut spec = bat_spec(3);
        spec.domains[1].lexicon = vec!["batman".into(), "signal".into()];
        assert!(spec.validate().is_err(), "bat now lives in one lexicon only");
    }

    #[test]
    fn tokenizer_roundtrip_and_unknowns() {
        let vocab = Vocab::from_words(["bat", "cave"], 512).unwrap();
        assert!(tokenize("", &vocab).is_empty());
        assert_eq!(detokenize(&[], &vocab), "");
        let ids = tokenize("bat cave bat", &vocab);
        assert_eq!(ids, vec![vocab.id("bat"), vocab.id("cave"), vocab.id("bat")]);
        assert_eq!(detokenize(&ids, &vocab), "bat cave bat");
        assert_eq!(tokenize("joker", &vocab), vec![UNK]);
        assert_eq!((vocab.id("<unk>"), vocab.id("<bos>"), vocab.id("<pad>")), (0, 1, 2));
    }

    #[test]
    fn vocab_json_roundtrip() {
        let vocab = Vocab::from_words(["bat", "cave", "wings"], 512).unwrap();
        let back = Vocab::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(back, vocab);
        assert!(Vocab::from_words((0..600).map(|i| format!("w{i}")), 512).is_err());
    }

    #[test]
    fn stopwords_by_frequency() {
        let vocab = Vocab::from_words(["a", "b", "c"], 512).unwrap();
        let seq = tokenize("a a a b b c", &vocab);
        let sw = build_stopwords(std::slice::from_ref(&seq), vocab.len(), 0).unwrap();
        assert_eq!(sw.ids, BTreeSet::from([0, 1, 2]));
        let sw = build_stopwords(std::slice::from_ref(&seq), vocab.len(), 1).unwrap();
        assert_eq!(sw.ids, BTreeSet::from([0, 1, 2, vocab.id("a")]));
        assert!(build_stopwords(&[seq], vocab.len(), vocab.len()).is_err());
        assert_eq!(default_stopword_count(100), 16);
        assert_eq!(default_stopword_count(2000), 40);
    }

    #[test]
    fn trap_prompts_end_on_bridge() {
        let mut spec = bat_spec(40);
        spec.domains[1].lexicon.push("signal".into());
        let prompts = trap_prompts(&spec, 0, 5, 1, 3).unwrap();
        assert_eq!(prompts.len(), 5);
        for p in prompts {
            assert_eq!(p.words.last().unwrap(), "bat");
        }
        spec.bridge_words.clear();
        assert!(trap_prompts(&spec, 0, 5, 1, 3).is_err());
    }

    #[test]
    fn split_is_95_5_and_disjoint() {
        let mut spec = bat_spec(100);
        spec.domains[1].lexicon.push("signal".into());
        let docs = generate_corpus(&spec).unwrap();
        let (train, val) = split_documents(&docs, 1);
        assert_eq!((train.len(), val.len()), (95, 5));
        assert_eq!(split_documents(&docs, 1), (train, val));
    }
}
