//! Dialogue corpora: JSONL ingestion, validation, context-response pair
//! extraction and deterministic dialogue-level splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

/// One turn. Utterances are ordered token sequences; every downstream
/// procedure (shuffling, recurrent encoding) depends on that order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub speaker: Speaker,
    pub raw_text: Option<String>,
}

impl Utterance {
    pub fn new(speaker: Speaker, tokens: Vec<String>) -> Self {
        Utterance {
            tokens,
            speaker,
            raw_text: None,
        }
    }

    /// Tokenizes `text` and keeps it as `raw_text`.
    pub fn from_text(speaker: Speaker, text: &str) -> Self {
        Utterance {
            tokens: tokenize(text),
            speaker,
            raw_text: Some(text.to_string()),
        }
    }

    /// Same speaker, new tokens, no raw text.
    pub fn with_tokens(&self, tokens: Vec<String>) -> Self {
        Utterance::new(self.speaker, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.raw_text.clone().unwrap_or_else(|| self.tokens.join(" "))
    }
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '\u{2026}'
                | '\u{ab}'
                | '\u{bb}'
                | '\u{bf}'
                | '\u{a1}'
                | '\u{2013}'
                | '\u{2014}'
        )
}

/// Lowercases, splits on whitespace and strips punctuation at token edges.
/// Tokens that are pure punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_edge_punct).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub meta: BTreeMap<String, String>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        Dialogue {
            id: id.into(),
            utterances,
            meta: BTreeMap::new(),
        }
    }

    /// Builds an alternating-speaker dialogue (starting with `A`) from raw turns.
    pub fn from_turns(id: impl Into<String>, turns: &[&str]) -> Self {
        let mut speaker = Speaker::A;
        let utterances = turns
            .iter()
            .map(|t| {
                let u = Utterance::from_text(speaker, t);
                speaker = speaker.other();
                u
            })
            .collect();
        Dialogue::new(id, utterances)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A single scoring unit: the first `turn_index` utterances and the one after.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextResponsePair {
    pub dialogue_id: String,
    pub context: Vec<Utterance>,
    pub response: Utterance,
    /// Number of context utterances (1-based index of the last one).
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 1-based turn number, when the violation concerns one utterance.
    pub turn: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.turn {
            Some(t) => write!(f, "turn {t} `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

/// Checks the utterance and dialogue invariants. Never fails; an empty list
/// means the dialogue is well formed.
pub fn validate_dialogue(d: &Dialogue) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.id.is_empty() {
        out.push(Violation {
            turn: None,
            field: "id",
            message: "empty dialogue id".into(),
        });
    }
    if d.utterances.is_empty() {
        out.push(Violation {
            turn: None,
            field: "utterances",
            message: "dialogue has no utterances".into(),
        });
    }
    for (i, u) in d.utterances.iter().enumerate() {
        if u.tokens.is_empty() {
            out.push(Violation {
                turn: Some(i + 1),
                field: "text",
                message: "no tokens after tokenization".into(),
            });
        }
        if i > 0 && d.utterances[i - 1].speaker == u.speaker {
            out.push(Violation {
                turn: Some(i + 1),
                field: "speaker",
                message: format!(
                    "speakers must alternate; turns {} and {} are both {:?}",
                    i,
                    i + 1,
                    u.speaker
                ),
            });
        }
    }
    out
}

fn violations_error(d: &Dialogue, violations: &[Violation]) -> Error {
    Error::Validation {
        dialogue: d.id.clone(),
        violations: violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    }
}

/// Context prefixes of a dialogue paired with the utterance that follows.
/// A dialogue of `n` utterances yields `n - 1` pairs (none for `n <= 1`).
pub fn extract_pairs(d: &Dialogue) -> Vec<ContextResponsePair> {
    (1..d.utterances.len())
        .map(|k| ContextResponsePair {
            dialogue_id: d.id.clone(),
            context: d.utterances[..k].to_vec(),
            response: d.utterances[k].clone(),
            turn_index: k,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    /// Builds a corpus after validating every dialogue and id uniqueness.
    pub fn new(name: impl Into<String>, dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &dialogues {
            let v = validate_dialogue(d);
            if !v.is_empty() {
                return Err(violations_error(d, &v));
            }
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Validation {
                    dialogue: d.id.clone(),
                    violations: "`id`: duplicate dialogue id".into(),
                });
            }
        }
        Ok(Corpus {
            name: name.into(),
            dialogues,
        })
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn pairs(&self) -> Vec<ContextResponsePair> {
        self.dialogues.iter().flat_map(extract_pairs).collect()
    }

    pub fn pair_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.len().saturating_sub(1)).sum()
    }

    /// Dialogues that contribute no pairs.
    pub fn single_utterance_count(&self) -> usize {
        self.dialogues.iter().filter(|d| d.len() < 2).count()
    }

    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonUtterance {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct JsonDialogue {
    id: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    utterances: Vec<JsonUtterance>,
}

impl From<JsonDialogue> for Dialogue {
    fn from(j: JsonDialogue) -> Self {
        Dialogue {
            id: j.id,
            meta: j.meta,
            utterances: j
                .utterances
                .into_iter()
                .map(|u| Utterance::from_text(u.speaker, &u.text))
                .collect(),
        }
    }
}

impl From<&Dialogue> for JsonDialogue {
    fn from(d: &Dialogue) -> Self {
        JsonDialogue {
            id: d.id.clone(),
            meta: d.meta.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| JsonUtterance {
                    speaker: u.speaker,
                    text: u.text(),
                })
                .collect(),
        }
    }
}

/// Parses one dialogue from a JSON value in the corpus line schema.
pub fn dialogue_from_json(value: serde_json::Value) -> serde_json::Result<Dialogue> {
    serde_json::from_value::<JsonDialogue>(value).map(Dialogue::from)
}

pub fn dialogue_to_json(d: &Dialogue) -> serde_json::Value {
    serde_json::to_value(JsonDialogue::from(d)).expect("dialogue serializes")
}

/// Reads a JSONL corpus (one dialogue object per line, blank lines skipped).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dialogues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonDialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        dialogues.push(Dialogue::from(parsed));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Corpus::new(name, dialogues)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in &corpus.dialogues {
        serde_json::to_writer(&mut w, &JsonDialogue::from(d))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        SplitFractions { train, val, test }
    }
}

/// Partitions dialogues into train/val/test. Validation and test sizes are
/// `floor(fraction * n)`; the remainder goes to train. Each split keeps the
/// corpus order of its dialogues.
pub fn split_corpus(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let SplitFractions { train, val, test } = fractions;
    if ![train, val, test].iter().all(|f| f.is_finite() && *f > 0.0) {
        return Err(Error::Argument(format!(
            "split fractions must be positive, got ({train}, {val}, {test})"
        )));
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must sum to 1, got {}",
            train + val + test
        )));
    }
    let n = corpus.len();
    let n_val = (val * n as f64 + 1e-9).floor() as usize;
    let n_test = (test * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::rng_for(seed, &[rng::stream::SPLIT]), &mut order);

    let take = |range: std::ops::Range<usize>, suffix: &str| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        Corpus {
            name: format!("{}/{suffix}", corpus.name),
            dialogues: idx.into_iter().map(|i| corpus.dialogues[i].clone()).collect(),
        }
    };
    Ok((
        take(0..n_train, "train"),
        take(n_train..n_train + n_val, "val"),
        take(n_train + n_val..n, "test"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, turns: &[&str]) -> Dialogue {
        Dialogue::from_turns(id, turns)
    }

    #[test]
    fn tokenize_strips_edge_punctuation() {
        assert_eq!(
            tokenize("Hello, World!  it's \"fine\" ... ok?"),
            vec!["hello", "world", "it's", "fine", "ok"]
        );
    }

    #[test]
    fn four_turns_give_three_prefix_pairs() {
        let d = dialogue("d", &["a", "b", "c", "d"]);
        let pairs = extract_pairs(&d);
        assert_eq!(pairs.len(), 3);
        for (k, p) in pairs.iter().enumerate() {
            assert_eq!(p.context.len(), k + 1);
            assert_eq!(p.turn_index, k + 1);
            assert_eq!(p.response, d.utterances[k + 1]);
        }
        assert_eq!(pairs[0].context, vec![d.utterances[0].clone()]);
    }

    #[test]
    fn short_dialogues() {
        assert!(extract_pairs(&dialogue("d", &["only"])).is_empty());
        let two = dialogue("d", &["x", "y"]);
        let p = extract_pairs(&two);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].context, vec![two.utterances[0].clone()]);
        assert_eq!(p[0].response, two.utterances[1]);
    }

    #[test]
    fn validation_reports_alternation_and_empty_turns() {
        assert!(validate_dialogue(&dialogue("ok", &["a", "b", "c"])).is_empty());

        let mut same = dialogue("s", &["a", "b"]);
        same.utterances[1].speaker = Speaker::A;
        let v = validate_dialogue(&same);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "speaker");
        assert!(v[0].message.contains("alternate"));

        let empty = dialogue("e", &["a", "...", "c"]);
        let v = validate_dialogue(&empty);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].turn, Some(2));
        assert!(v[0].to_string().contains("turn 2"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = Corpus::new("c", (0..10).map(|i| dialogue(&format!("d{i}"), &["a", "b"])).collect()).unwrap();
        let f = SplitFractions::new(0.8, 0.1, 0.1);
        let (tr, va, te) = split_corpus(&c, f, 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let mut ids: Vec<_> = tr
            .dialogues
            .iter()
            .chain(&va.dialogues)
            .chain(&te.dialogues)
            .map(|d| d.id.clone())
            .collect();
        ids.sort();
        let mut expected: Vec<_> = c.dialogues.iter().map(|d| d.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert_eq!(split_corpus(&c, f, 7).unwrap(), (tr, va, te));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let c = Corpus::new("c", vec![dialogue("d", &["a"])]).unwrap();
        for f in [
            SplitFractions::new(0.8, 0.1, 0.2),
            SplitFractions::new(1.0, 0.0, 0.0),
            SplitFractions::new(0.9, 0.2, -0.1),
        ] {
            assert!(matches!(split_corpus(&c, f, 1), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Corpus::new("c", vec![dialogue("d", &["a"]), dialogue("d", &["b"])]);
        assert!(matches!(r, Err(Error::Validation { .. })));
    }
}
