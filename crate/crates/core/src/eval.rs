//! Evaluation protocols: score/Δ tables per response type, zero-shot
//! cross-corpus Δ, and rank correlation with human dialogue ratings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{
    dialogue_from_json, dialogue_to_json, extract_pairs, validate_dialogue, Corpus, Dialogue, Utterance,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, stream};
use crate::sampling::{sample_negative, Paraphraser, Provenance, ResponseGenerator, SamplingPolicy};
use crate::scorer::{ResponseScorer, ScorerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    GoldTruth,
    BackTranslation,
    Seq2seq,
    RandomUtterance,
    RandomSeq2seq,
    WordDrop,
    WordOrder,
    WordRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SemanticPositive,
    SemanticNegative,
    SyntacticNegative,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::SemanticPositive => "semantic_positive",
            Category::SemanticNegative => "semantic_negative",
            Category::SyntacticNegative => "syntactic_negative",
        }
    }
}

impl EvalMode {
    pub const ALL: [EvalMode; 8] = [
        EvalMode::GoldTruth,
        EvalMode::BackTranslation,
        EvalMode::Seq2seq,
        EvalMode::RandomUtterance,
        EvalMode::RandomSeq2seq,
        EvalMode::WordDrop,
        EvalMode::WordOrder,
        EvalMode::WordRepeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::GoldTruth => "gold_truth",
            EvalMode::BackTranslation => "back_translation",
            EvalMode::Seq2seq => "seq2seq",
            EvalMode::RandomUtterance => "random_utterance",
            EvalMode::RandomSeq2seq => "random_seq2seq",
            EvalMode::WordDrop => "word_drop",
            EvalMode::WordOrder => "word_order",
            EvalMode::WordRepeat => "word_repeat",
        }
    }

    pub fn parse(s: &str) -> Result<EvalMode> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown eval mode `{s}`")))
    }

    pub fn category(self) -> Category {
        match self {
            EvalMode::GoldTruth | EvalMode::BackTranslation | EvalMode::Seq2seq => Category::SemanticPositive,
            EvalMode::RandomUtterance | EvalMode::RandomSeq2seq => Category::SemanticNegative,
            EvalMode::WordDrop | EvalMode::WordOrder | EvalMode::WordRepeat => Category::SyntacticNegative,
        }
    }

    fn needs_other_dialogues(self) -> bool {
        self.category() == Category::SemanticNegative
    }
}

/// Builds the candidate response a mode compares against the truth.
#[allow(clippy::too_many_arguments)]
pub fn candidate(
    mode: EvalMode,
    context: &[Utterance],
    truth: &Utterance,
    dialogue_id: &str,
    corpus: &Corpus,
    gen: &dyn ResponseGenerator,
    para: &dyn Paraphraser,
    seed: u64,
) -> Result<Utterance> {
    let pair = crate::corpus::ContextResponsePair {
        dialogue_id: dialogue_id.to_string(),
        context: context.to_vec(),
        response: truth.clone(),
        turn_index: context.len(),
    };
    let policy = SamplingPolicy::default();
    let negative = |p| sample_negative(p, &pair, &policy, corpus, gen, para, seed);
    let mut out = match mode {
        EvalMode::GoldTruth => return Ok(truth.clone()),
        EvalMode::BackTranslation => para.paraphrase(truth),
        EvalMode::Seq2seq => gen.generate(context, seed),
        EvalMode::RandomUtterance => negative(Provenance::RandomUtterance)?,
        EvalMode::RandomSeq2seq => negative(Provenance::RandomGenerated)?,
        EvalMode::WordDrop => negative(Provenance::WordDrop)?,
        EvalMode::WordOrder => negative(Provenance::WordOrder)?,
        EvalMode::WordRepeat => negative(Provenance::WordRepeat)?,
    };
    out.speaker = truth.speaker;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub mode: EvalMode,
    pub category: Category,
    pub model: String,
    pub n: usize,
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
    /// Candidates identical to the truth token-for-token (kept, not filtered).
    pub collisions: usize,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub corpus: String,
    pub model: String,
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
    pub config: serde_json::Value,
    pub rows: Vec<DeltaRow>,
    /// ROC-AUC of gold-truth scores against random-utterance scores.
    pub auc_gold_vs_random_utterance: Option<f64>,
}

impl DeltaReport {
    pub fn row(&self, mode: EvalMode) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,category,model,n,mean_score,std_score,mean_delta,std_delta,collisions\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.mode.name(),
                r.category.name(),
                r.model,
                r.n,
                r.mean_score,
                r.std_score,
                r.mean_delta,
                r.std_delta,
                r.collisions
            );
        }
        s
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (0 for fewer than two values).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Scores every context-response pair of `corpus` against one candidate per
/// mode; Δ = score(truth) - score(candidate).
pub fn evaluate_delta_table(
    m: &ScorerModel,
    corpus: &Corpus,
    modes: &[EvalMode],
    gen: &dyn ResponseGenerator,
    para: &dyn Paraphraser,
    seed: u64,
) -> Result<DeltaReport> {
    let pairs = corpus.pairs();
    if pairs.is_empty() {
        return Err(Error::Argument(format!(
            "corpus `{}` has no context-response pairs",
            corpus.name
        )));
    }
    if corpus.len() < 2 && modes.iter().any(|m| m.needs_other_dialogues()) {
        return Err(Error::Sampling(format!(
            "random modes need at least 2 dialogues; corpus `{}` has {}",
            corpus.name,
            corpus.len()
        )));
    }
    // per pair: (truth score, [(candidate score, collision)] per mode)
    let per_pair = par::try_map_indexed(&pairs, |i, p| {
        let cands = modes
            .iter()
            .map(|&mode| {
                let s = rng::derive(seed, &[stream::EVAL, mode as u64, i as u64]);
                candidate(mode, &p.context, &p.response, &p.dialogue_id, corpus, gen, para, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut refs: Vec<&Utterance> = vec![&p.response];
        refs.extend(cands.iter());
        let scores = m.score_many(&p.context, &refs)?;
        let truth = scores[0].value();
        let rows: Vec<(f64, bool)> = scores[1..]
            .iter()
            .zip(&cands)
            .map(|(s, c)| (s.value(), c.tokens == p.response.tokens))
            .collect();
        Ok::<_, Error>((truth, rows))
    })?;
    let rows = modes
        .iter()
        .enumerate()
        .map(|(k, &mode)| {
            let scores: Vec<f64> = per_pair.iter().map(|(_, r)| r[k].0).collect();
            let deltas: Vec<f64> = per_pair.iter().map(|(t, r)| t - r[k].0).collect();
            DeltaRow {
                mode,
                category: mode.category(),
                model: m.kind().name().to_string(),
                n: scores.len(),
                mean_score: mean(&scores),
                std_score: std_dev(&scores),
                mean_delta: mean(&deltas),
                std_delta: std_dev(&deltas),
                collisions: per_pair.iter().filter(|(_, r)| r[k].1).count(),
                scores,
            }
        })
        .collect::<Vec<_>>();
    let auc = match (
        rows.iter().find(|r| r.mode == EvalMode::GoldTruth),
        rows.iter().find(|r| r.mode == EvalMode::RandomUtterance),
    ) {
        (Some(g), Some(r)) => Some(roc_auc(&g.scores, &r.scores)?),
        _ => None,
    };
    Ok(DeltaReport {
        corpus: corpus.name.clone(),
        model: m.kind().name().to_string(),
        seed,
        checkpoint_hash: None,
        config: serde_json::to_value(&m.config)?,
        rows,
        auc_gold_vs_random_utterance: auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub trained_on: String,
    pub evaluated_on: String,
    /// False when the evaluation corpus overlaps the training corpus.
    pub zero_shot: bool,
    pub positive_mean: f64,
    pub negative_mean: f64,
    /// Semantic-positive mean score minus semantic-negative mean score.
    pub delta: f64,
    pub table: DeltaReport,
}

fn base_name(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

/// Whether `other` shares its source with `trained_on`: same base corpus
/// name, or more than half its dialogues reproduced verbatim.
pub fn overlaps(trained_on: &Corpus, other: &Corpus) -> bool {
    if base_name(&trained_on.name) == base_name(&other.name) {
        return true;
    }
    let seen: std::collections::HashSet<Vec<&[String]>> = trained_on
        .dialogues
        .iter()
        .map(|d| d.utterances.iter().map(|u| u.tokens.as_slice()).collect())
        .collect();
    let shared = other
        .dialogues
        .iter()
        .filter(|d| seen.contains(&d.utterances.iter().map(|u| u.tokens.as_slice()).collect::<Vec<_>>()))
        .count();
    shared * 2 > other.len()
}

/// Δ between gold-truth and random-utterance scores on a corpus the model was
/// not trained on.
pub fn zero_shot_eval(
    m: &ScorerModel,
    other: &Corpus,
    trained_on: &Corpus,
    gen: &dyn ResponseGenerator,
    para: &dyn Paraphraser,
    seed: u64,
) -> Result<ZeroShotReport> {
    let table = evaluate_delta_table(
        m,
        other,
        &[EvalMode::GoldTruth, EvalMode::RandomUtterance],
        gen,
        para,
        seed,
    )?;
    let positive_mean = table.rows[0].mean_score;
    let negative_mean = table.rows[1].mean_score;
    Ok(ZeroShotReport {
        trained_on: trained_on.name.clone(),
        evaluated_on: other.name.clone(),
        zero_shot: !overlaps(trained_on, other),
        positive_mean,
        negative_mean,
        delta: positive_mean - negative_mean,
        table,
    })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative (ties 1/2).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument("ROC-AUC needs positives and negatives".into()));
    }
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let ranks = average_ranks(&all);
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    let np = pos.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64))
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Correlation(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Correlation(format!(
            "need at least 3 observations, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Correlation("non-finite input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::Correlation(
            "constant input: rank correlation is undefined".into(),
        ));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Two-sided p-value of ρ under the t approximation with n - 2 dof.
pub fn spearman_p_value(rho: f64, n: usize) -> Option<f64> {
    if n < 3 {
        return None;
    }
    if rho.abs() >= 1.0 {
        return Some(0.0);
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanJudgementLog {
    pub id: String,
    pub dialogue: Dialogue,
    pub roles: Option<Vec<Role>>,
    pub ratings: BTreeMap<String, f64>,
    pub calibrated: bool,
    /// Inclusive rating scale, when declared.
    pub scale: Option<(f64, f64)>,
}

#[derive(Deserialize)]
struct JsonLog {
    id: String,
    dialogue: serde_json::Value,
    #[serde(default)]
    roles: Option<Vec<Role>>,
    ratings: BTreeMap<String, f64>,
    #[serde(default)]
    calibrated: bool,
    #[serde(default)]
    scale: Option<(f64, f64)>,
}

impl HumanJudgementLog {
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = validate_dialogue(&self.dialogue)
            .iter()
            .map(ToString::to_string)
            .collect();
        if let Some(roles) = &self.roles {
            if roles.len() != self.dialogue.len() {
                problems.push(format!(
                    "roles has {} entries for {} utterances",
                    roles.len(),
                    self.dialogue.len()
                ));
            }
        }
        for (q, r) in &self.ratings {
            if !r.is_finite() {
                problems.push(format!("rating `{q}` is not finite"));
            } else if let Some((lo, hi)) = self.scale {
                if *r < lo || *r > hi {
                    problems.push(format!("rating `{q}` = {r} outside scale [{lo}, {hi}]"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation {
                dialogue: self.id.clone(),
                violations: problems.join("; "),
            })
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "id": self.id,
            "dialogue": dialogue_to_json(&self.dialogue),
            "ratings": self.ratings,
            "calibrated": self.calibrated,
        });
        if let Some(r) = &self.roles {
            v["roles"] = serde_json::to_value(r).expect("roles serialize");
        }
        if let Some((lo, hi)) = self.scale {
            v["scale"] = serde_json::json!([lo, hi]);
        }
        v
    }
}

pub fn parse_human_log(line: &str) -> std::result::Result<HumanJudgementLog, String> {
    let raw: JsonLog = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let dialogue = dialogue_from_json(raw.dialogue).map_err(|e| format!("dialogue: {e}"))?;
    let log = HumanJudgementLog {
        id: raw.id,
        dialogue,
        roles: raw.roles,
        ratings: raw.ratings,
        calibrated: raw.calibrated,
        scale: raw.scale,
    };
    log.validate().map_err(|e| e.to_string())?;
    Ok(log)
}

/// Reads human-judgement logs from JSONL (blank lines skipped).
pub fn load_human_logs(path: impl AsRef<Path>) -> Result<Vec<HumanJudgementLog>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_human_log(l).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })
        })
        .collect()
}

pub fn save_human_logs(logs: &[HumanJudgementLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(&l.to_json())?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Response indices that are scored. With roles, only model turns that
/// directly follow a human turn; otherwise every utterance after the first.
pub fn scorable_turns(d: &Dialogue, roles: Option<&[Role]>) -> Vec<usize> {
    (1..d.len())
        .filter(|&j| match roles {
            Some(r) => r.get(j) == Some(&Role::Model) && r.get(j - 1) == Some(&Role::Human),
            None => true,
        })
        .collect()
}

/// Mean score over the dialogue's scorable context-response pairs.
pub fn aggregate_dialogue_score(scorer: &dyn ResponseScorer, d: &Dialogue, roles: Option<&[Role]>) -> Result<f64> {
    let turns = scorable_turns(d, roles);
    if turns.is_empty() {
        return Err(Error::Aggregation(format!("dialogue `{}` has no scorable turns", d.id)));
    }
    let pairs = extract_pairs(d);
    let mut total = 0.0;
    for &j in &turns {
        let p = &pairs[j - 1];
        total += scorer.score_pair(&p.context, &p.response)?;
    }
    Ok(total / turns.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionCorrelation {
    pub question: String,
    pub rho: f64,
    pub n: usize,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedQuestion {
    pub question: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_logs: usize,
    pub calibrated_logs: usize,
    pub questions: Vec<QuestionCorrelation>,
    pub skipped: Vec<SkippedQuestion>,
    pub mean_rho: Option<f64>,
    pub checkpoint_hash: Option<String>,
    pub config: serde_json::Value,
}

impl CorrelationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("question,rho,n,p_value\n");
        for q in &self.questions {
            let p = q.p_value.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", q.question, q.rho, q.n, p);
        }
        s
    }
}

/// Spearman ρ per rating question between aggregated dialogue scores and
/// human ratings. Questions with fewer than 3 ratings, or constant values,
/// are skipped and listed in the report.
pub fn correlate(scorer: &dyn ResponseScorer, logs: &[HumanJudgementLog]) -> Result<CorrelationReport> {
    if logs.len() < 3 {
        return Err(Error::Correlation(format!("need at least 3 logs, got {}", logs.len())));
    }
    let scores = par::try_map_indexed(logs, |_, l| {
        aggregate_dialogue_score(scorer, &l.dialogue, l.roles.as_deref())
    })?;
    let mut by_question: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (l, s) in logs.iter().zip(&scores) {
        for (q, r) in &l.ratings {
            let e = by_question.entry(q).or_default();
            e.0.push(*s);
            e.1.push(*r);
        }
    }
    let mut questions = Vec::new();
    let mut skipped = Vec::new();
    for (q, (xs, ys)) in by_question {
        match spearman(&xs, &ys) {
            Ok(rho) => questions.push(QuestionCorrelation {
                question: q.to_string(),
                rho,
                n: xs.len(),
                p_value: spearman_p_value(rho, xs.len()),
            }),
            Err(e) => {
                log::warn!("skipping question `{q}`: {e}");
                skipped.push(SkippedQuestion {
                    question: q.to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let mean_rho =
        (!questions.is_empty()).then(|| questions.iter().map(|q| q.rho).sum::<f64>() / questions.len() as f64);
    Ok(CorrelationReport {
        n_logs: logs.len(),
        calibrated_logs: logs.iter().filter(|l| l.calibrated).count(),
        questions,
        skipped,
        mean_rho,
        checkpoint_hash: None,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Looks responses up by their first token: `s0.2` scores 0.2.
    struct TokenScorer;

    impl ResponseScorer for TokenScorer {
        fn score_pair(&self, _: &[Utterance], r: &Utterance) -> Result<f64> {
            Ok(r.tokens[0].trim_start_matches('s').parse().unwrap_or(0.5))
        }
    }

    #[test]
    fn categories_follow_table_grouping() {
        use EvalMode::*;
        let pos = [GoldTruth, BackTranslation, Seq2seq];
        let neg = [RandomUtterance, RandomSeq2seq];
        let syn = [WordDrop, WordOrder, WordRepeat];
        assert!(pos.iter().all(|m| m.category() == Category::SemanticPositive));
        assert!(neg.iter().all(|m| m.category() == Category::SemanticNegative));
        assert!(syn.iter().all(|m| m.category() == Category::SyntacticNegative));
        for m in EvalMode::ALL {
            assert_eq!(EvalMode::parse(m.name()).unwrap(), m);
        }
    }

    #[test]
    fn aggregate_mean_and_roles() {
        let d = Dialogue::from_turns("d", &["hi", "s0.2", "s0.4", "s0.6"]);
        assert!((aggregate_dialogue_score(&TokenScorer, &d, None).unwrap() - 0.4).abs() < 1e-12);
        let single = Dialogue::from_turns("one", &["hi", "s0.7"]);
        assert_eq!(aggregate_dialogue_score(&TokenScorer, &single, None).unwrap(), 0.7);
        let roles = [Role::Human, Role::Model, Role::Human, Role::Model];
        assert_eq!(scorable_turns(&d, Some(&roles)), vec![1, 3]);
        assert!((aggregate_dialogue_score(&TokenScorer, &d, Some(&roles)).unwrap() - 0.4).abs() < 1e-12);
        let all_model = [Role::Model; 4];
        assert!(matches!(
            aggregate_dialogue_score(&TokenScorer, &d, Some(&all_model)),
            Err(Error::Aggregation(m)) if m.contains("`d`")
        ));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1., 2.], &[1., 2.]).is_err());
        assert!(spearman(&[1., 2., 3.], &[1., 2.]).is_err());
        assert!(spearman(&[1., 1., 1.], &[1., 2., 3.]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1., 2., 2., 4.]), vec![1., 2.5, 2.5, 4.]);
        assert_eq!(average_ranks(&[3., 3., 3.]), vec![2., 2., 2.]);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn p_value_sane() {
        assert_eq!(spearman_p_value(1.0, 10), Some(0.0));
        let p = spearman_p_value(0.0, 10).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn human_log_round_trip_and_scale() {
        let log = HumanJudgementLog {
            id: "l1".into(),
            dialogue: Dialogue::from_turns("l1", &["hello there", "hi"]),
            roles: Some(vec![Role::Human, Role::Model]),
            ratings: [("engaging".to_string(), 3.0)].into(),
            calibrated: false,
            scale: Some((1.0, 4.0)),
        };
        let line = serde_json::to_string(&log.to_json()).unwrap();
        let back = parse_human_log(&line).unwrap();
        assert_eq!(back.ratings, log.ratings);
        assert_eq!(back.roles, log.roles);
        let bad = line.replace("3.0", "7.0");
        assert!(parse_human_log(&bad).unwrap_err().contains("outside scale"));
    }
}
