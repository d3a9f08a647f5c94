//! `score(context, response) ∈ (0, 1)`.
//!
//! The dialogue-aware model encodes each context utterance, downsamples it,
//! runs a bidirectional LSTM over the turn sequence, max-pools the per-turn
//! states and projects the result into response space:
//!
//! ```text
//! h_u   = D · enc(u)                      (per utterance, shared D)
//! s_t   = M · [lstm_fwd_t ; lstm_bwd_t] + b
//! c     = W · max_t s_t
//! score = σ(mlp([h_r, c, h_r * c, h_r - c]))
//! ```
//!
//! The flat baselines encode the whole context as one token sequence with
//! `<sep>` between turns and score `σ(mlp([h_c, h_r, h_c * h_r, h_c - h_r]))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{CachedAdapter, DownsampleLayer, EncodeCache, EncoderKind, EncoderNet, EncoderSpec, Vocab, SEP};
use crate::error::{Error, Result};
use crate::nn::math::{sigmoid, softplus};
use crate::nn::params::init_rng;
use crate::nn::{BiLstm, BiLstmCache, Linear, Mlp, MlpCache, ParamStore};
use crate::rng::{self, stream};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DialogueAware,
    FlatRecurrent,
    FlatExternal,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DialogueAware => "dialogue_aware",
            ModelKind::FlatRecurrent => "flat_recurrent",
            ModelKind::FlatExternal => "flat_external",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: ModelKind,
    pub encoder: EncoderSpec,
    /// Downsampled width `d`.
    pub model_dim: usize,
    /// Hidden width of the turn-level recurrent network.
    pub transition_hidden: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            kind: ModelKind::DialogueAware,
            encoder: EncoderSpec::default(),
            model_dim: 16,
            transition_hidden: 16,
            classifier_hidden: 200,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    /// Full-size widths: `d = 300` over a pretrained encoder's output.
    pub fn full_scale(encoder_dim: usize) -> Self {
        ScorerConfig {
            encoder: EncoderSpec {
                kind: EncoderKind::ExternalAdapter,
                embed_dim: encoder_dim,
                out_dim: encoder_dim,
                seed: 0,
            },
            model_dim: 300,
            transition_hidden: 300,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.model_dim == 0 || self.transition_hidden == 0 || self.classifier_hidden == 0 {
            return Err(Error::Argument("model widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.kind == ModelKind::DialogueAware
            && self.encoder.kind != EncoderKind::ExternalAdapter
            && self.model_dim > self.encoder.out_dim
        {
            return Err(Error::Argument(format!(
                "downsampler needs 0 < d <= B, got d = {}, B = {}",
                self.model_dim, self.encoder.out_dim
            )));
        }
        match (self.kind, self.encoder.kind) {
            (ModelKind::FlatRecurrent, EncoderKind::ExternalAdapter) => Err(Error::Argument(
                "flat_recurrent needs a toy encoder; use flat_external for adapters".into(),
            )),
            (ModelKind::FlatExternal, k) if k != EncoderKind::ExternalAdapter => Err(Error::Argument(
                "flat_external needs encoder kind external_adapter".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A score in the open interval `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ScoreValue(f64);

impl ScoreValue {
    const LOWEST: f64 = f64::MIN_POSITIVE;
    const HIGHEST: f64 = 1.0 - f64::EPSILON / 2.0;

    pub fn from_logit(z: f64) -> Self {
        ScoreValue(sigmoid(z).clamp(Self::LOWEST, Self::HIGHEST))
    }

    pub fn new(v: f64) -> Result<Self> {
        if v > 0.0 && v < 1.0 {
            Ok(ScoreValue(v))
        } else {
            Err(Error::Argument(format!("score {v} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `[u, v, u * v, u - v]`.
pub fn combine(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("combine: lengths {} and {}", u.len(), v.len())));
    }
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    out.extend(u.iter().zip(v).map(|(a, b)| a - b));
    Ok(out)
}

/// Gradients of a loss through [`combine`] back to `u` and `v`.
fn combine_backward(u: &[f64], v: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let du = (0..n).map(|k| d[k] + v[k] * d[2 * n + k] + d[3 * n + k]).collect();
    let dv = (0..n).map(|k| d[n + k] + u[k] * d[2 * n + k] - d[3 * n + k]).collect();
    (du, dv)
}

/// Anything that can score a (context, response) pair.
pub trait ResponseScorer: Sync {
    fn score_pair(&self, context: &[Utterance], response: &Utterance) -> Result<f64>;
}

#[derive(Debug, Clone)]
struct Transition {
    rnn: BiLstm,
    merge: Linear,
}

#[derive(Debug, Clone)]
struct ScorerNet {
    encoder: EncoderNet,
    downsampler: DownsampleLayer,
    transition: Option<Transition>,
    projection: Option<Linear>,
    classifier: Mlp,
}

#[derive(Debug, Clone)]
struct Encoded {
    raw: Vec<f64>,
    cache: EncodeCache,
    down: Vec<f64>,
}

#[derive(Debug, Clone)]
enum ContextCache {
    Dialogue {
        turns: Vec<Encoded>,
        rnn: BiLstmCache,
        rnn_out: Vec<Vec<f64>>,
        argmax: Vec<usize>,
        pooled: Vec<f64>,
    },
    Flat(Encoded),
}

/// Per-turn and pooled states of the transition network, before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStates {
    pub turn_states: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub projected: Vec<f64>,
}

/// Loss and score summary for one pair's batch of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub positive_scores: Vec<f64>,
    pub negative_scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScorerModel {
    pub config: ScorerConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    net: ScorerNet,
}

impl ScorerModel {
    pub fn new(config: ScorerConfig, vocab: Vocab, adapter: Option<Arc<CachedAdapter>>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(config.seed);
        let encoder = EncoderNet::build(&config.encoder, vocab.len(), adapter, &mut params, &mut rng)?;
        let b = encoder.output_dim();
        let d = config.model_dim;
        let downsampler = DownsampleLayer::new(&mut params, b, d, &mut rng)?;
        let (transition, projection) = if config.kind == ModelKind::DialogueAware {
            let h = config.transition_hidden;
            let rnn = BiLstm::new(&mut params, "transition.rnn", d, h, &mut rng);
            let merge = Linear::new(&mut params, "transition.merge", 2 * h, h, true, &mut rng);
            let proj = Linear::new(&mut params, "projection", h, d, false, &mut rng);
            (Some(Transition { rnn, merge }), Some(proj))
        } else {
            (None, None)
        };
        let classifier = Mlp::new(
            &mut params,
            "classifier",
            4 * d,
            config.classifier_hidden,
            config.dropout,
            &mut rng,
        );
        Ok(ScorerModel {
            config,
            vocab,
            params,
            net: ScorerNet {
                encoder,
                downsampler,
                transition,
                projection,
                classifier,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn adapter(&self) -> Option<&Arc<CachedAdapter>> {
        self.net.encoder.adapter()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Names of the classifier's parameters.
    pub fn classifier_param_names(&self) -> Vec<String> {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("classifier."))
            .map(|e| e.name.clone())
            .collect()
    }

    fn encode(&self, tokens: &[String]) -> Result<Encoded> {
        let (raw, cache) = self.net.encoder.forward(&self.params, &self.vocab, tokens)?;
        let down = self.net.downsampler.forward(&self.params, &raw);
        Ok(Encoded { raw, cache, down })
    }

    fn encoded_backward(&self, e: &Encoded, ddown: &[f64], grad: &mut [f64]) {
        let draw = self.net.downsampler.backward(&self.params, &e.raw, ddown, grad);
        self.net.encoder.backward(&self.params, &e.cache, &draw, grad);
    }

    /// Downsampled response embedding `h_r`.
    pub fn encode_response(&self, response: &Utterance) -> Result<Vec<f64>> {
        Ok(self.encode(&response.tokens)?.down)
    }

    fn flat_tokens(context: &[Utterance]) -> Vec<String> {
        let mut tokens = Vec::new();
        for (i, u) in context.iter().enumerate() {
            if i > 0 {
                tokens.push(SEP.to_string());
            }
            tokens.extend(u.tokens.iter().cloned());
        }
        tokens
    }

    fn context_forward(&self, context: &[Utterance]) -> Result<(Vec<f64>, ContextCache)> {
        if context.is_empty() {
            return Err(Error::Argument("context must contain at least one utterance".into()));
        }
        match (&self.net.transition, &self.net.projection) {
            (Some(tr), Some(proj)) => {
                let turns = context
                    .iter()
                    .map(|u| self.encode(&u.tokens))
                    .collect::<Result<Vec<_>>>()?;
                let xs: Vec<&[f64]> = turns.iter().map(|t| t.down.as_slice()).collect();
                let (rnn_out, rnn) = tr.rnn.forward(&self.params, &xs);
                let states: Vec<Vec<f64>> = rnn_out.iter().map(|o| tr.merge.forward(&self.params, o)).collect();
                let h = tr.merge.output;
                let mut pooled = states[0].clone();
                let mut argmax = vec![0usize; h];
                for (t, s) in states.iter().enumerate().skip(1) {
                    for k in 0..h {
                        if s[k] > pooled[k] {
                            pooled[k] = s[k];
                            argmax[k] = t;
                        }
                    }
                }
                let c = proj.forward(&self.params, &pooled);
                Ok((
                    c,
                    ContextCache::Dialogue {
                        turns,
                        rnn,
                        rnn_out,
                        argmax,
                        pooled,
                    },
                ))
            }
            _ => {
                let e = self.encode(&Self::flat_tokens(context))?;
                Ok((e.down.clone(), ContextCache::Flat(e)))
            }
        }
    }

    fn context_backward(&self, cache: &ContextCache, dc: &[f64], grad: &mut [f64]) {
        match cache {
            ContextCache::Dialogue {
                turns,
                rnn,
                rnn_out,
                argmax,
                pooled,
            } => {
                let tr = self.net.transition.as_ref().expect("dialogue-aware model");
                let proj = self.net.projection.as_ref().expect("dialogue-aware model");
                let dpooled = proj.backward(&self.params, pooled, dc, grad);
                let h = dpooled.len();
                let mut drnn = Vec::with_capacity(turns.len());
                for (t, out) in rnn_out.iter().enumerate() {
                    let ds: Vec<f64> = (0..h).map(|k| if argmax[k] == t { dpooled[k] } else { 0.0 }).collect();
                    if ds.iter().all(|v| *v == 0.0) {
                        drnn.push(vec![0.0; out.len()]);
                    } else {
                        drnn.push(tr.merge.backward(&self.params, out, &ds, grad));
                    }
                }
                let xs: Vec<&[f64]> = turns.iter().map(|t| t.down.as_slice()).collect();
                let dxs = tr.rnn.backward(&self.params, &xs, rnn, &drnn, grad);
                for (turn, dx) in turns.iter().zip(&dxs) {
                    self.encoded_backward(turn, dx, grad);
                }
            }
            ContextCache::Flat(e) => self.encoded_backward(e, dc, grad),
        }
    }

    /// Combination features with the ordering of the model kind.
    fn features(&self, c: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        match self.kind() {
            ModelKind::DialogueAware => combine(r, c),
            _ => combine(c, r),
        }
    }

    /// Returns `(dc, dr)`.
    fn features_backward(&self, c: &[f64], r: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.kind() {
            ModelKind::DialogueAware => {
                let (dr, dc) = combine_backward(r, c, d);
                (dc, dr)
            }
            _ => combine_backward(c, r, d),
        }
    }

    /// The context vector `c` of the dialogue-aware model.
    pub fn encode_context_dialogue(&self, context: &[Utterance]) -> Result<Vec<f64>> {
        Ok(self.context_states(context)?.projected)
    }

    /// Turn states, their elementwise max and its projection.
    pub fn context_states(&self, context: &[Utterance]) -> Result<ContextStates> {
        let tr =
            self.net.transition.as_ref().ok_or_else(|| {
                Error::Argument(format!("{} model has no dialogue-level context encoder", self.kind()))
            })?;
        let (projected, cache) = self.context_forward(context)?;
        match cache {
            ContextCache::Dialogue { rnn_out, pooled, .. } => Ok(ContextStates {
                turn_states: rnn_out.iter().map(|o| tr.merge.forward(&self.params, o)).collect(),
                pooled,
                projected,
            }),
            ContextCache::Flat(_) => unreachable!("dialogue-aware model produced a flat cache"),
        }
    }

    /// Context encoding used for scoring (dialogue-level or flat, by kind).
    pub fn encode_context(&self, context: &[Utterance]) -> Result<Vec<f64>> {
        Ok(self.context_forward(context)?.0)
    }

    /// Classifier logit in eval mode.
    pub fn logit(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        let (c, _) = self.context_forward(context)?;
        let r = self.encode_response(response)?;
        self.logit_from_parts(&c, &r)
    }

    /// Logit from precomputed context and response vectors.
    pub fn logit_from_parts(&self, c: &[f64], r: &[f64]) -> Result<f64> {
        let f = self.features(c, r)?;
        Ok(self.net.classifier.forward(&self.params, &f, None).0)
    }

    pub fn score(&self, context: &[Utterance], response: &Utterance) -> Result<ScoreValue> {
        Ok(ScoreValue::from_logit(self.logit(context, response)?))
    }

    /// Scores several responses against one context, encoding it once.
    pub fn score_many(&self, context: &[Utterance], responses: &[&Utterance]) -> Result<Vec<ScoreValue>> {
        let (c, _) = self.context_forward(context)?;
        responses
            .iter()
            .map(|r| {
                let h = self.encode_response(r)?;
                Ok(ScoreValue::from_logit(self.logit_from_parts(&c, &h)?))
            })
            .collect()
    }

    /// `score(c, r_truth) - score(c, r_cand)`.
    pub fn delta(&self, context: &[Utterance], truth: &Utterance, candidate: &Utterance) -> Result<f64> {
        let s = self.score_many(context, &[truth, candidate])?;
        Ok(s[0].value() - s[1].value())
    }

    /// NCE loss of one context against labelled candidate responses, with
    /// gradients accumulated into `grad`:
    /// `-mean(log s⁺) - mean(log(1 - s⁻))`.
    ///
    /// Dropout is active iff `dropout_seed` is given.
    pub fn pair_loss_grad(
        &self,
        context: &[Utterance],
        examples: &[(&[String], bool)],
        dropout_seed: Option<u64>,
        grad: &mut [f64],
    ) -> Result<PairLoss> {
        let n_pos = examples.iter().filter(|e| e.1).count();
        let n_neg = examples.len() - n_pos;
        if examples.is_empty() {
            return Err(Error::Argument("no examples for pair".into()));
        }
        let (c, ccache) = self.context_forward(context)?;
        let mut dc = vec![0.0; c.len()];
        let mut loss = 0.0;
        let mut positive_scores = Vec::with_capacity(n_pos);
        let mut negative_scores = Vec::with_capacity(n_neg);
        for (i, (tokens, positive)) in examples.iter().enumerate() {
            let enc = self.encode(tokens)?;
            let feats = self.features(&c, &enc.down)?;
            let mut drng = dropout_seed.map(|s| rng::rng_for(s, &[stream::DROPOUT, i as u64]));
            let (z, mcache): (f64, MlpCache) = self.net.classifier.forward(&self.params, &feats, drng.as_mut());
            let s = sigmoid(z);
            let dz = if *positive {
                loss += softplus(-z) / n_pos.max(1) as f64;
                positive_scores.push(s);
                (s - 1.0) / n_pos.max(1) as f64
            } else {
                loss += softplus(z) / n_neg.max(1) as f64;
                negative_scores.push(s);
                s / n_neg.max(1) as f64
            };
            let dfeat = self.net.classifier.backward(&self.params, &mcache, dz, grad);
            let (dci, dr) = self.features_backward(&c, &enc.down, &dfeat);
            for (a, b) in dc.iter_mut().zip(&dci) {
                *a += b;
            }
            self.encoded_backward(&enc, &dr, grad);
        }
        self.context_backward(&ccache, &dc, grad);
        Ok(PairLoss {
            loss,
            positive_scores,
            negative_scores,
        })
    }

    /// Loss only (no gradient), eval mode.
    pub fn pair_loss(&self, context: &[Utterance], examples: &[(&[String], bool)]) -> Result<f64> {
        let n_pos = examples.iter().filter(|e| e.1).count();
        let n_neg = examples.len() - n_pos;
        let (c, _) = self.context_forward(context)?;
        let mut loss = 0.0;
        for (tokens, positive) in examples {
            let r = self.encode(tokens)?.down;
            let z = self.logit_from_parts(&c, &r)?;
            loss += if *positive {
                softplus(-z) / n_pos.max(1) as f64
            } else {
                softplus(z) / n_neg.max(1) as f64
            };
        }
        Ok(loss)
    }
}

impl ResponseScorer for ScorerModel {
    fn score_pair(&self, context: &[Utterance], response: &Utterance) -> Result<f64> {
        Ok(self.score(context, response)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use crate::encoder::EncoderKind;

    fn utt(s: &str, sp: Speaker) -> Utterance {
        Utterance::new(sp, s.split_whitespace().map(str::to_string).collect())
    }

    fn vocab() -> Vocab {
        Vocab::from_tokens("a b c d e f g h".split(' ').map(str::to_string))
    }

    fn small(kind: ModelKind, seed: u64) -> ScorerModel {
        let cfg = ScorerConfig {
            kind,
            encoder: EncoderSpec {
                kind: EncoderKind::ToyRecurrent,
                embed_dim: 6,
                out_dim: 8,
                seed,
            },
            model_dim: 4,
            transition_hidden: 5,
            classifier_hidden: 7,
            dropout: 0.2,
            seed,
        };
        ScorerModel::new(cfg, vocab(), None).unwrap()
    }

    #[test]
    fn combine_hand_example() {
        assert_eq!(
            combine(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 3.0, 8.0, -2.0, -2.0]
        );
    }

    #[test]
    fn combine_edge_cases() {
        let u = [0.5, -1.5, 2.0];
        let same = combine(&u, &u).unwrap();
        assert!(same[9..].iter().all(|v| *v == 0.0));
        let zero = combine(&u, &[0.0; 3]).unwrap();
        assert!(zero[6..9].iter().all(|v| *v == 0.0));
        assert_eq!(&zero[9..], &u);
        assert!(matches!(combine(&u, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_turn_context_pools_its_own_state() {
        let m = small(ModelKind::DialogueAware, 3);
        let st = m.context_states(&[utt("a b c", Speaker::A)]).unwrap();
        assert_eq!(st.turn_states.len(), 1);
        assert_eq!(st.pooled, st.turn_states[0]);
    }

    #[test]
    fn pooled_dominates_turn_states() {
        let m = small(ModelKind::DialogueAware, 4);
        let ctx = [utt("a b", Speaker::A), utt("c d e", Speaker::B), utt("f", Speaker::A)];
        let st = m.context_states(&ctx).unwrap();
        for s in &st.turn_states {
            for (p, v) in st.pooled.iter().zip(s) {
                assert!(p >= v);
            }
        }
    }

    #[test]
    fn empty_context_and_flat_context_states_error() {
        let m = small(ModelKind::DialogueAware, 1);
        assert!(matches!(m.encode_context_dialogue(&[]), Err(Error::Argument(_))));
        let f = small(ModelKind::FlatRecurrent, 1);
        assert!(f.encode_context_dialogue(&[utt("a", Speaker::A)]).is_err());
    }

    #[test]
    fn zero_classifier_scores_one_half() {
        let mut m = small(ModelKind::DialogueAware, 2);
        for name in m.classifier_param_names() {
            let slot = m.params.entry(&name).unwrap().slot;
            m.params.get_mut(slot).iter_mut().for_each(|v| *v = 0.0);
        }
        let s = m.score(&[utt("a b", Speaker::A)], &utt("c", Speaker::B)).unwrap();
        assert_eq!(s.value(), 0.5);
    }

    #[test]
    fn delta_of_identical_responses_is_zero() {
        let m = small(ModelKind::FlatRecurrent, 2);
        let r = utt("d e", Speaker::B);
        assert_eq!(m.delta(&[utt("a", Speaker::A)], &r, &r).unwrap(), 0.0);
    }

    #[test]
    fn extreme_logits_stay_inside_open_interval() {
        for z in [-1e6, -800.0, 0.0, 40.0, 800.0, 1e6] {
            let v = ScoreValue::from_logit(z).value();
            assert!(v > 0.0 && v < 1.0, "{z} -> {v}");
        }
    }

    #[test]
    fn mismatched_encoder_kind_rejected() {
        let cfg = ScorerConfig {
            kind: ModelKind::FlatExternal,
            ..Default::default()
        };
        assert!(ScorerModel::new(cfg, vocab(), None).is_err());
    }
}
