//! Desk-scale synthetic dialogue corpora with planted structure.
//!
//! Each dialogue walks through `phases` consecutive phases. Every phase owns
//! its own vocabulary, partitioned by dialogue topic and by utterance slot:
//! the token at position `j` of an utterance always comes from slot `j`, so
//! word order carries signal. A dialogue picks one topic and keeps it.
//!
//! Token names are a pure function of `(phase, topic, slot, word)`, so two
//! corpora generated with different seeds share one vocabulary and grammar.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Fraction of an utterance that may come from outside its source phase.
pub const MAX_NOISE_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub phases: usize,
    pub vocab_per_phase: usize,
    /// Probability that a response draws from the dialogue's current phase.
    pub coherence: f64,
    pub seed: u64,
    /// Topic blocks inside each phase vocabulary.
    pub topics: usize,
    pub min_utterance_len: usize,
    pub max_utterance_len: usize,
    /// Per-token probability of an off-phase token (capped at 30% of the utterance).
    pub token_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_dialogues: 200,
            min_turns: 12,
            max_turns: 12,
            phases: 4,
            vocab_per_phase: 96,
            coherence: 0.95,
            seed: 1,
            topics: 4,
            min_utterance_len: 4,
            max_utterance_len: 8,
            token_noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn words_per_cell(&self) -> usize {
        self.vocab_per_phase / (self.topics.max(1) * self.max_utterance_len.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(format!("synthetic spec: {m}")));
        if self.phases < 2 {
            return bad(format!("phases must be >= 2, got {}", self.phases));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return bad(format!("coherence must lie in [0,1], got {}", self.coherence));
        }
        if !(0.0..=1.0).contains(&self.token_noise) {
            return bad(format!("token_noise must lie in [0,1], got {}", self.token_noise));
        }
        if self.min_turns < self.phases || self.max_turns < self.min_turns {
            return bad(format!(
                "turn range {}..={} must cover every phase ({})",
                self.min_turns, self.max_turns, self.phases
            ));
        }
        if self.topics == 0 || self.min_utterance_len == 0 {
            return bad("topics and utterance lengths must be positive".into());
        }
        if self.max_utterance_len < self.min_utterance_len {
            return bad("max_utterance_len < min_utterance_len".into());
        }
        if self.words_per_cell() == 0 {
            return bad(format!(
                "vocab_per_phase {} too small for {} topics x {} slots",
                self.vocab_per_phase, self.topics, self.max_utterance_len
            ));
        }
        Ok(())
    }
}

pub fn token_name(phase: usize, topic: usize, slot: usize, word: usize) -> String {
    format!("p{phase}k{topic}s{slot}w{word}")
}

/// Phase encoded in a synthetic token name, if it is one.
pub fn token_phase(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('p')?;
    let end = rest.find('k')?;
    rest[..end].parse().ok()
}

/// Scheduled phase of utterance `i` in a dialogue of `n` utterances.
pub fn scheduled_phase(i: usize, n: usize, phases: usize) -> usize {
    i * phases / n
}

/// Generates a corpus; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let wpc = spec.words_per_cell();
    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues {
        let mut r = rng::rng_for(spec.seed, &[stream::SYNTH, d as u64]);
        let topic = rng::below(&mut r, spec.topics);
        let n = spec.min_turns + rng::below(&mut r, spec.max_turns - spec.min_turns + 1);
        let mut utterances = Vec::with_capacity(n);
        let mut schedule = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        let mut speaker = Speaker::A;
        for i in 0..n {
            let current = scheduled_phase(i, n, spec.phases);
            let source = if i == 0 || rng::bernoulli(&mut r, spec.coherence) {
                current
            } else {
                let k = rng::below(&mut r, spec.phases - 1);
                if k >= current {
                    k + 1
                } else {
                    k
                }
            };
            let len = spec.min_utterance_len + rng::below(&mut r, spec.max_utterance_len - spec.min_utterance_len + 1);
            let mut noise_budget = (MAX_NOISE_FRACTION * len as f64).floor() as usize;
            let tokens: Vec<String> = (0..len)
                .map(|slot| {
                    let mut phase = source;
                    if noise_budget > 0 && rng::bernoulli(&mut r, spec.token_noise) {
                        noise_budget -= 1;
                        let k = rng::below(&mut r, spec.phases - 1);
                        phase = if k >= source { k + 1 } else { k };
                    }
                    token_name(phase, topic, slot, rng::below(&mut r, wpc))
                })
                .collect();
            utterances.push(Utterance {
                raw_text: Some(tokens.join(" ")),
                tokens,
                speaker,
            });
            speaker = speaker.other();
            schedule.push(current);
            sources.push(source);
        }
        let mut dialogue = Dialogue::new(format!("synth-{}-{d:05}", spec.seed), utterances);
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        dialogue.meta.insert("source".into(), "synthetic".into());
        dialogue.meta.insert("topic".into(), topic.to_string());
        dialogue.meta.insert("phase_schedule".into(), join(&schedule));
        dialogue.meta.insert("source_phases".into(), join(&sources));
        dialogues.push(dialogue);
    }
    Corpus::new(format!("synthetic-{}", spec.seed), dialogues)
}

/// Synonym pairs: every token maps to the other words of its
/// (phase, topic, slot) cell.
pub fn synthetic_synonyms(spec: &SyntheticSpec) -> Vec<(String, String)> {
    let wpc = spec.words_per_cell();
    let mut out = Vec::new();
    for p in 0..spec.phases {
        for k in 0..spec.topics {
            for s in 0..spec.max_utterance_len {
                for a in 0..wpc {
                    for b in (0..wpc).filter(|&b| b != a) {
                        out.push((token_name(p, k, s, a), token_name(p, k, s, b)));
                    }
                }
            }
        }
    }
    out
}

/// Permutes utterance order inside every dialogue (speakers re-alternated),
/// destroying temporal structure while keeping the utterance multiset.
pub fn shuffle_utterances(corpus: &Corpus, seed: u64) -> Corpus {
    let dialogues = corpus
        .dialogues
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut utts = d.utterances.clone();
            rng::shuffle(&mut rng::rng_for(seed, &[stream::SHUFFLE, i as u64]), &mut utts);
            let mut speaker = Speaker::A;
            for u in &mut utts {
                u.speaker = speaker;
                speaker = speaker.other();
            }
            let mut out = Dialogue::new(d.id.clone(), utts);
            out.meta = d.meta.clone();
            out.meta.remove("phase_schedule");
            out.meta.remove("source_phases");
            out.meta.insert("shuffled".into(), "true".into());
            out
        })
        .collect();
    Corpus {
        name: format!("{}-shuffled", corpus.name),
        dialogues,
    }
}
