//! Analytic gradients against central finite differences, in f64 with dropout off.

use dialogue_metric::corpus::{Speaker, Utterance};
use dialogue_metric::encoder::{DownsampleLayer, EncoderKind, EncoderNet, EncoderSpec, Vocab};
use dialogue_metric::nn::gradcheck::{pick_indices, probe};
use dialogue_metric::nn::ParamStore;
use dialogue_metric::rng;
use dialogue_metric::scorer::{ModelKind, ScorerConfig, ScorerModel};
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const PROBES: usize = 8;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn vocab() -> Vocab {
    Vocab::from_tokens(toks("the cat sat on a mat dog ran far away home now"))
}

fn assert_probes(params: &ParamStore, analytic: &[f64], loss: impl Fn(&ParamStore) -> f64, seed: u64) {
    let idx = pick_indices(analytic, &[], PROBES, &mut rng::rng(seed));
    assert!(idx.len() >= 5, "only {} parameters with non-zero gradient", idx.len());
    for p in probe(params, loss, analytic, &idx, STEP) {
        assert!(
            p.rel_error < TOL,
            "param {}: analytic {:.9e} numeric {:.9e} rel {:.2e}",
            p.index,
            p.analytic,
            p.numeric,
            p.rel_error
        );
    }
}

/// Loss `sum_i c_i * out_i` with fixed random weights.
fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn check_encoder(kind: EncoderKind) {
    let spec = EncoderSpec {
        kind,
        embed_dim: 6,
        out_dim: if kind == EncoderKind::ToyMeanEmbed { 6 } else { 8 },
        seed: 1,
    };
    let v = vocab();
    let mut store = ParamStore::new();
    let net = EncoderNet::build(&spec, v.len(), None, &mut store, &mut rng::rng(2)).unwrap();
    let tokens = toks("the dog ran home the");
    let c = weights(net.output_dim(), 3);
    let loss = |p: &ParamStore| {
        let (out, _) = net.forward(p, &v, &tokens).unwrap();
        out.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = net.forward(&store, &v, &tokens).unwrap();
    let mut grad = store.zeros_like();
    net.backward(&store, &cache, &c, &mut grad);
    assert_probes(&store, &grad, loss, 4);
}

#[test]
fn toy_mean_encoder_gradients() {
    check_encoder(EncoderKind::ToyMeanEmbed);
}

#[test]
fn toy_recurrent_encoder_gradients() {
    check_encoder(EncoderKind::ToyRecurrent);
}

#[test]
fn downsampler_gradients() {
    let mut store = ParamStore::new();
    let layer = DownsampleLayer::new(&mut store, 7, 3, &mut rng::rng(5)).unwrap();
    let h = weights(7, 6);
    let c = weights(3, 7);
    let loss = |p: &ParamStore| layer.forward(p, &h).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let mut grad = store.zeros_like();
    let dh = layer.backward(&store, &h, &c, &mut grad);
    assert_probes(&store, &grad, loss, 8);
    // Input gradient: out is linear in h, so d loss / d h_i = sum_j M_ij c_j.
    for (i, d) in dh.iter().enumerate() {
        let mut hp = h.clone();
        hp[i] += STEP;
        let mut hm = h.clone();
        hm[i] -= STEP;
        let f = |x: &[f64]| layer.forward(&store, x).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let numeric = (f(&hp) - f(&hm)) / (2.0 * STEP);
        assert!((numeric - d).abs() < 1e-8);
    }
}

fn utt(s: &str, sp: Speaker) -> Utterance {
    Utterance::new(sp, toks(s))
}

fn check_full_path(kind: ModelKind, encoder: EncoderKind) {
    let cfg = ScorerConfig {
        kind,
        encoder: EncoderSpec {
            kind: encoder,
            embed_dim: 5,
            out_dim: if encoder == EncoderKind::ToyMeanEmbed { 5 } else { 6 },
            seed: 0,
        },
        model_dim: 4,
        transition_hidden: 3,
        classifier_hidden: 7,
        dropout: 0.2,
        seed: 11,
    };
    let model = ScorerModel::new(cfg, vocab(), None).unwrap();
    let context = [
        utt("the cat sat", Speaker::A),
        utt("on a mat now", Speaker::B),
        utt("dog ran far", Speaker::A),
    ];
    let pos = toks("away home now");
    let bt = toks("the home now");
    let neg1 = toks("now now home away");
    let neg2 = toks("cat");
    let examples: Vec<(&[String], bool)> = vec![(&pos, true), (&bt, true), (&neg1, false), (&neg2, false)];
    let mut grad = model.params.zeros_like();
    let out = model.pair_loss_grad(&context, &examples, None, &mut grad).unwrap();
    assert!((out.loss - model.pair_loss(&context, &examples).unwrap()).abs() < 1e-12);
    let loss = |p: &ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        m.pair_loss(&context, &examples).unwrap()
    };
    // Probe every tensor, so each stage of the path is exercised.
    for (k, e) in model.params.entries().iter().enumerate() {
        let candidates: Vec<usize> = e.slot.range().collect();
        let idx = pick_indices(&grad, &candidates, 2, &mut rng::rng(k as u64));
        for p in probe(&model.params, loss, &grad, &idx, STEP) {
            assert!(p.rel_error < TOL, "{} [{}]: {:?}", e.name, p.index, p);
        }
    }
    assert_probes(&model.params, &grad, loss, 99);
}

#[test]
fn full_dialogue_aware_score_gradients() {
    check_full_path(ModelKind::DialogueAware, EncoderKind::ToyRecurrent);
}

#[test]
fn dialogue_aware_over_mean_encoder_gradients() {
    check_full_path(ModelKind::DialogueAware, EncoderKind::ToyMeanEmbed);
}

#[test]
fn flat_recurrent_score_gradients() {
    check_full_path(ModelKind::FlatRecurrent, EncoderKind::ToyRecurrent);
}
