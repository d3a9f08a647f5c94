//! Negative (and paraphrase-positive) response sampling for NCE training.
//!
//! Syntactic negatives corrupt the true response: [`word_drop`],
//! [`word_order`], [`word_repeat`]. Semantic negatives are fluent but wrong
//! for the context: an utterance from another dialogue, a generated
//! response for another context, and a paraphrase of another dialogue's
//! utterance. A paraphrase of the true response is an extra positive.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ContextResponsePair, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::synthetic::token_phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SyntaxOnly,
    SemanticsOnly,
    Both,
}

impl Regime {
    pub fn syntactic(self) -> bool {
        matches!(self, Regime::SyntaxOnly | Regime::Both)
    }

    pub fn semantic(self) -> bool {
        matches!(self, Regime::SemanticsOnly | Regime::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub regime: Regime,
    pub drop_rate: f64,
    pub repeat_rate: f64,
    /// Negatives drawn from each enabled generator per positive.
    pub negatives_per_positive: usize,
    pub include_bt_positive: bool,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            regime: Regime::Both,
            drop_rate: 0.3,
            repeat_rate: 0.3,
            negatives_per_positive: 1,
            include_bt_positive: true,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("drop_rate", self.drop_rate), ("repeat_rate", self.repeat_rate)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Argument(format!("{name} must lie in (0, 1), got {r}")));
            }
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Argument("negatives_per_positive must be >= 1".into()));
        }
        Ok(())
    }

    /// Provenances of the generators this policy enables, in batch order.
    pub fn negative_generators(&self) -> Vec<Provenance> {
        let mut out = Vec::new();
        if self.regime.syntactic() {
            out.extend([Provenance::WordDrop, Provenance::WordOrder, Provenance::WordRepeat]);
        }
        if self.regime.semantic() {
            out.extend([
                Provenance::RandomUtterance,
                Provenance::RandomGenerated,
                Provenance::RandomBt,
            ]);
        }
        out
    }

    /// Number of examples `make_batch` returns for any pair.
    pub fn batch_size(&self) -> usize {
        1 + usize::from(self.include_bt_positive) + self.negatives_per_positive * self.negative_generators().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    BtPositive,
    WordDrop,
    WordOrder,
    WordRepeat,
    RandomUtterance,
    RandomGenerated,
    RandomBt,
}

impl Provenance {
    pub fn label(self) -> Label {
        match self {
            Provenance::GroundTruth | Provenance::BtPositive => Label::Positive,
            _ => Label::Negative,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: Arc<[Utterance]>,
    pub response: Utterance,
    pub label: Label,
    pub provenance: Provenance,
}

impl TrainingExample {
    pub fn new(context: Arc<[Utterance]>, response: Utterance, provenance: Provenance) -> Self {
        TrainingExample {
            context,
            response,
            label: provenance.label(),
            provenance,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

/// Keeps `max(1, round((1 - rate) * len))` tokens in their original order.
pub fn word_drop(r: &Utterance, rate: f64, seed: u64) -> Utterance {
    let n = r.len();
    let keep = (((1.0 - rate) * n as f64).round() as usize).clamp(1, n.max(1));
    if keep >= n {
        return r.with_tokens(r.tokens.clone());
    }
    let mut rng = rng::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = i + rng::below(&mut rng, n - i);
        idx.swap(i, j);
    }
    let mut kept = idx[..keep].to_vec();
    kept.sort_unstable();
    r.with_tokens(kept.into_iter().map(|i| r.tokens[i].clone()).collect())
}

/// Shuffles the tokens. For two or more tokens the draw is repeated until
/// the token sequence changes (or, if every token is identical, until the
/// index permutation is not the identity).
pub fn word_order(r: &Utterance, seed: u64) -> Utterance {
    let n = r.len();
    if n < 2 {
        return r.with_tokens(r.tokens.clone());
    }
    let all_same = r.tokens.iter().all(|t| *t == r.tokens[0]);
    let mut rng = rng::rng(seed);
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng, &mut perm);
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            continue;
        }
        let tokens: Vec<String> = perm.iter().map(|&i| r.tokens[i].clone()).collect();
        if all_same || tokens != r.tokens {
            return r.with_tokens(tokens);
        }
    }
}

/// Duplicates each token in place with probability `rate`.
pub fn word_repeat(r: &Utterance, rate: f64, seed: u64) -> Utterance {
    let mut rng = rng::rng(seed);
    let mut out = Vec::with_capacity(2 * r.len());
    for t in &r.tokens {
        out.push(t.clone());
        if rng::bernoulli(&mut rng, rate) {
            out.push(t.clone());
        }
    }
    r.with_tokens(out)
}

/// Location of a sampled utterance: `(dialogue index, utterance index)`.
pub fn random_utterance_index(corpus: &Corpus, exclude_dialogue: &str, seed: u64) -> Result<(usize, usize)> {
    let eligible: usize = corpus
        .dialogues
        .iter()
        .filter(|d| d.id != exclude_dialogue)
        .map(|d| d.len())
        .sum();
    if eligible == 0 {
        return Err(Error::Sampling(format!(
            "no utterances outside dialogue `{exclude_dialogue}` in corpus `{}`",
            corpus.name
        )));
    }
    let mut k = rng::below(&mut rng::rng(seed), eligible);
    for (di, d) in corpus.dialogues.iter().enumerate() {
        if d.id == exclude_dialogue {
            continue;
        }
        if k < d.len() {
            return Ok((di, k));
        }
        k -= d.len();
    }
    unreachable!("index within eligible count")
}

/// An utterance drawn uniformly from every dialogue except `exclude_dialogue`.
pub fn random_utterance(corpus: &Corpus, exclude_dialogue: &str, seed: u64) -> Result<Utterance> {
    let (d, u) = random_utterance_index(corpus, exclude_dialogue, seed)?;
    Ok(corpus.dialogues[d].utterances[u].clone())
}

/// Produces a response for a context. Stand-in for a trained seq2seq model.
pub trait ResponseGenerator: Send + Sync {
    fn generate(&self, context: &[Utterance], seed: u64) -> Utterance;
}

/// Produces a paraphrase of an utterance. Stand-in for back-translation.
pub trait Paraphraser: Send + Sync {
    fn paraphrase(&self, u: &Utterance) -> Utterance;
}

/// Samples responses position by position from unigram tables.
///
/// For synthetic corpora (dialogues carrying `source_phases` metadata) there
/// is one table per phase, and the phase is inferred from the last context
/// utterance; otherwise a single corpus-wide table is used.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    /// group -> slot -> observed tokens (with multiplicity)
    tables: Vec<Vec<Vec<String>>>,
    lengths: Vec<Vec<usize>>,
    token_group: HashMap<String, usize>,
}

impl TemplateGenerator {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let phased = !corpus.is_empty() && corpus.dialogues.iter().all(|d| d.meta.contains_key("source_phases"));
        let mut groups: HashMap<usize, (Vec<Vec<String>>, Vec<usize>)> = HashMap::new();
        for d in &corpus.dialogues {
            let phases: Vec<usize> = if phased {
                d.meta["source_phases"]
                    .split(',')
                    .map(|p| p.trim().parse().unwrap_or(0))
                    .collect()
            } else {
                vec![0; d.len()]
            };
            for (u, &g) in d.utterances.iter().zip(&phases) {
                let (slots, lens) = groups.entry(g).or_default();
                if slots.len() < u.len() {
                    slots.resize(u.len(), Vec::new());
                }
                for (j, t) in u.tokens.iter().enumerate() {
                    slots[j].push(t.clone());
                }
                lens.push(u.len());
            }
        }
        if groups.is_empty() {
            return Err(Error::Sampling("cannot build a generator from an empty corpus".into()));
        }
        let n_groups = groups.keys().max().copied().unwrap_or(0) + 1;
        let mut tables = vec![Vec::new(); n_groups];
        let mut lengths = vec![Vec::new(); n_groups];
        for (g, (slots, lens)) in groups {
            tables[g] = slots;
            lengths[g] = lens;
        }
        let mut token_group = HashMap::new();
        if phased {
            for (g, slots) in tables.iter().enumerate() {
                for t in slots.iter().flatten() {
                    if token_phase(t) == Some(g) {
                        token_group.insert(t.clone(), g);
                    }
                }
            }
        }
        Ok(TemplateGenerator {
            tables,
            lengths,
            token_group,
        })
    }

    fn infer_group(&self, context: &[Utterance], rng: &mut rng::StreamRng) -> usize {
        let populated: Vec<usize> = (0..self.tables.len())
            .filter(|&g| !self.lengths[g].is_empty())
            .collect();
        let Some(last) = context.last() else {
            return populated[rng::below(rng, populated.len())];
        };
        let mut votes = vec![0usize; self.tables.len()];
        for t in &last.tokens {
            if let Some(&g) = self.token_group.get(t) {
                votes[g] += 1;
            }
        }
        match votes
            .iter()
            .enumerate()
            .max_by_key(|(g, v)| (**v, std::cmp::Reverse(*g)))
        {
            Some((g, &v)) if v > 0 => g,
            _ => populated[0],
        }
    }
}

impl ResponseGenerator for TemplateGenerator {
    fn generate(&self, context: &[Utterance], seed: u64) -> Utterance {
        let mut rng = rng::rng(seed);
        let g = self.infer_group(context, &mut rng);
        let lens = &self.lengths[g];
        let len = lens[rng::below(&mut rng, lens.len())].max(1);
        let slots = &self.tables[g];
        let tokens = (0..len)
            .map(|j| {
                let pool = slots.get(j).filter(|s| !s.is_empty()).unwrap_or(&slots[0]);
                pool[rng::below(&mut rng, pool.len())].clone()
            })
            .collect();
        let speaker = context
            .last()
            .map(|u| u.speaker.other())
            .unwrap_or(crate::corpus::Speaker::A);
        Utterance::new(speaker, tokens)
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "so", "of", "to", "in", "on", "at", "for", "with", "is", "are", "was", "i",
    "you", "it", "that", "this", "my", "your", "we", "do", "not", "just", "really", "very",
];

/// Replaces roughly `rate` of the tokens that have synonyms, then swaps
/// adjacent stopword pairs. Deterministic: randomness is keyed on the input.
#[derive(Debug, Clone)]
pub struct SynonymParaphraser {
    synonyms: HashMap<String, Vec<String>>,
    stopwords: HashSet<String>,
    rate: f64,
}

impl SynonymParaphraser {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>, rate: f64) -> Self {
        let mut synonyms: HashMap<String, Vec<String>> = HashMap::new();
        for (a, b) in pairs {
            if a != b {
                synonyms.entry(a).or_default().push(b);
            }
        }
        for v in synonyms.values_mut() {
            v.sort();
            v.dedup();
        }
        SynonymParaphraser {
            synonyms,
            stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
            rate,
        }
    }

    /// Reads a two-column TSV (`token<TAB>synonym`); `#` starts a comment.
    pub fn from_tsv(path: impl AsRef<Path>, rate: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    pairs.push((a.to_lowercase(), b.to_lowercase()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: "expected two tab-separated columns".into(),
                    })
                }
            }
        }
        Ok(Self::new(pairs, rate))
    }

    pub fn len(&self) -> usize {
        self.synonyms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty()
    }

    fn seed_for(tokens: &[String]) -> u64 {
        let mut h = Sha256::new();
        for t in tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

impl Paraphraser for SynonymParaphraser {
    fn paraphrase(&self, u: &Utterance) -> Utterance {
        let mut rng = rng::rng(Self::seed_for(&u.tokens));
        let mut tokens = u.tokens.clone();
        let candidates: Vec<usize> = (0..tokens.len())
            .filter(|&i| self.synonyms.contains_key(&tokens[i]))
            .collect();
        let mut replaced = 0;
        for &i in &candidates {
            if rng::bernoulli(&mut rng, self.rate) {
                let syn = &self.synonyms[&u.tokens[i]];
                tokens[i] = syn[rng::below(&mut rng, syn.len())].clone();
                replaced += 1;
            }
        }
        if replaced == 0 && !candidates.is_empty() {
            let i = candidates[rng::below(&mut rng, candidates.len())];
            let syn = &self.synonyms[&u.tokens[i]];
            tokens[i] = syn[rng::below(&mut rng, syn.len())].clone();
        }
        let mut i = 0;
        while i + 1 < tokens.len() {
            if self.stopwords.contains(&tokens[i]) && self.stopwords.contains(&tokens[i + 1]) {
                tokens.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        u.with_tokens(tokens)
    }
}

fn draw_seed(seed: u64, p: Provenance, j: usize) -> u64 {
    rng::derive(seed, &[stream::NEGATIVES, p.tag(), j as u64])
}

/// A context from another dialogue: the prefix before a random utterance.
fn foreign_context(corpus: &Corpus, exclude: &str, seed: u64) -> Result<Vec<Utterance>> {
    let (d, u) = random_utterance_index(corpus, exclude, seed)?;
    let d = &corpus.dialogues[d];
    Ok(d.utterances[..u.max(1).min(d.len())].to_vec())
}

/// One negative of kind `p` for `pair`, guaranteed to differ from the true
/// response for the syntactic kinds whenever the response has >= 2 tokens.
pub fn sample_negative(
    p: Provenance,
    pair: &ContextResponsePair,
    policy: &SamplingPolicy,
    corpus: &Corpus,
    gen: &dyn ResponseGenerator,
    para: &dyn Paraphraser,
    seed: u64,
) -> Result<Utterance> {
    let truth = &pair.response;
    let mut out = match p {
        Provenance::WordDrop => {
            let mut u = word_drop(truth, policy.drop_rate, seed);
            if u.tokens == truth.tokens && truth.len() >= 2 {
                let mut r = rng::rng_for(seed, &[1]);
                let i = rng::below(&mut r, truth.len());
                u.tokens.remove(i);
            }
            u
        }
        Provenance::WordOrder => word_order(truth, seed),
        Provenance::WordRepeat => {
            let mut u = word_repeat(truth, policy.repeat_rate, seed);
            if u.tokens == truth.tokens {
                let mut r = rng::rng_for(seed, &[1]);
                let i = rng::below(&mut r, truth.len());
                let t = u.tokens[i].clone();
                u.tokens.insert(i, t);
            }
            u
        }
        Provenance::RandomUtterance => random_utterance(corpus, &pair.dialogue_id, seed)?,
        Provenance::RandomGenerated => {
            let ctx = foreign_context(corpus, &pair.dialogue_id, seed)?;
            gen.generate(&ctx, rng::derive(seed, &[2]))
        }
        Provenance::RandomBt => para.paraphrase(&random_utterance(corpus, &pair.dialogue_id, seed)?),
        Provenance::GroundTruth | Provenance::BtPositive => {
            return Err(Error::Argument(format!("{p:?} is not a negative generator")))
        }
    };
    out.speaker = truth.speaker;
    out.raw_text = None;
    Ok(out)
}

/// Assembles the positives and negatives for one pair.
///
/// Output order: ground truth, optional paraphrase positive, then for each
/// enabled generator `negatives_per_positive` draws.
pub fn make_batch(
    pair: &ContextResponsePair,
    policy: &SamplingPolicy,
    corpus: &Corpus,
    gen: &dyn ResponseGenerator,
    para: &dyn Paraphraser,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    policy.validate()?;
    let context: Arc<[Utterance]> = pair.context.clone().into();
    let mut out = Vec::with_capacity(policy.batch_size());
    out.push(TrainingExample::new(
        context.clone(),
        pair.response.clone(),
        Provenance::GroundTruth,
    ));
    if policy.include_bt_positive {
        let mut bt = para.paraphrase(&pair.response);
        bt.speaker = pair.response.speaker;
        out.push(TrainingExample::new(context.clone(), bt, Provenance::BtPositive));
    }
    for p in policy.negative_generators() {
        for j in 0..policy.negatives_per_positive {
            let r = sample_negative(p, pair, policy, corpus, gen, para, draw_seed(seed, p, j))?;
            out.push(TrainingExample::new(context.clone(), r, p));
        }
    }
    Ok(out)
}
