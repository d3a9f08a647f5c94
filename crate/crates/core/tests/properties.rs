//! Property tests for the module invariants.

use std::collections::HashMap;

use dialogue_metric::corpus::{
    extract_pairs, load_corpus, save_corpus, split_corpus, Corpus, Dialogue, Speaker, SplitFractions, Utterance,
};
use dialogue_metric::encoder::{Downsampler, EncoderSpec, UtteranceEmbedding, Vocab};
use dialogue_metric::eval::{aggregate_dialogue_score, spearman};
use dialogue_metric::probe::{assign_bin, fit_lda_2d, pair_time, BinSpec};
use dialogue_metric::sampling::{
    make_batch, word_drop, word_order, word_repeat, Provenance, Regime, SamplingPolicy, SynonymParaphraser,
    TemplateGenerator,
};
use dialogue_metric::scorer::{combine, ModelKind, ResponseScorer, ScorerConfig, ScorerModel};
use dialogue_metric::synthetic::{generate_synthetic, synthetic_synonyms, SyntheticSpec};
use dialogue_metric::training::{nce_loss, single_step, Hyperparams};
use dialogue_metric::{rng, Error};
use proptest::prelude::*;
use rand::Rng;

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_default() += 1;
    }
    m
}

fn tokens_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn utt(tokens: Vec<String>) -> Utterance {
    Utterance::new(Speaker::A, tokens)
}

#[test]
fn syntactic_multiset_laws_over_1000_draws() {
    let mut r = rng::rng(2024);
    let vocab = ["w", "x", "y", "z", "q"];
    for seed in 0..1000u64 {
        let len = 1 + rng::below(&mut r, 10);
        let tokens: Vec<String> = (0..len)
            .map(|_| vocab[rng::below(&mut r, vocab.len())].to_string())
            .collect();
        let u = utt(tokens.clone());
        let src = counts(&tokens);

        let o = word_order(&u, seed);
        assert_eq!(counts(&o.tokens), src);

        let d = word_drop(&u, 0.3, seed);
        let dc = counts(&d.tokens);
        assert!(dc.iter().all(|(t, c)| src.get(t).is_some_and(|s| c <= s)));
        assert!(!d.is_empty());

        let w = word_repeat(&u, 0.3, seed);
        let wc = counts(&w.tokens);
        assert_eq!(wc.len(), src.len());
        assert!(src.iter().all(|(t, c)| wc[t] >= *c && wc[t] <= 2 * c));
    }
}

proptest! {
    #[test]
    fn word_order_is_a_permutation(tokens in tokens_strategy(), seed: u64) {
        let u = utt(tokens.clone());
        let o = word_order(&u, seed);
        prop_assert_eq!(counts(&o.tokens), counts(&tokens));
        let distinct = tokens.iter().any(|t| *t != tokens[0]);
        if distinct {
            prop_assert_ne!(o.tokens, tokens);
        }
    }

    #[test]
    fn word_drop_keeps_order_and_size(tokens in tokens_strategy(), rate in 0.01f64..0.99, seed: u64) {
        let u = utt(tokens.clone());
        let d = word_drop(&u, rate, seed);
        let keep = (((1.0 - rate) * tokens.len() as f64).round() as usize).clamp(1, tokens.len());
        prop_assert_eq!(d.len(), keep);
        let mut it = tokens.iter();
        prop_assert!(d.tokens.iter().all(|t| it.any(|x| x == t)));
    }

    #[test]
    fn word_repeat_bounds(tokens in tokens_strategy(), rate in 0.01f64..0.99, seed: u64) {
        let w = word_repeat(&utt(tokens.clone()), rate, seed);
        prop_assert!(w.len() >= tokens.len() && w.len() <= 2 * tokens.len());
    }

    #[test]
    fn combine_slices_recover_inputs(
        u in prop::collection::vec(-1e3f64..1e3, 1..16),
        seed: u64,
    ) {
        let mut r = rng::rng(seed);
        let v: Vec<f64> = (0..u.len()).map(|_| r.gen_range(-1e3..1e3)).collect();
        let c = combine(&u, &v).unwrap();
        let d = u.len();
        prop_assert_eq!(c.len(), 4 * d);
        prop_assert_eq!(&c[..d], &u[..]);
        prop_assert_eq!(&c[d..2 * d], &v[..]);
        for k in 0..d {
            prop_assert_eq!(c[2 * d + k], u[k] * v[k]);
            prop_assert_eq!(c[3 * d + k], u[k] - v[k]);
        }
    }

    #[test]
    fn downsample_is_linear(seed: u64, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng::rng(seed);
        let (bd, dd) = (9, 4);
        let m: Vec<f64> = (0..bd * dd).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ds = Downsampler::new(m, bd, dd).unwrap();
        let h1: Vec<f64> = (0..bd).map(|_| r.gen_range(-2.0..2.0)).collect();
        let h2: Vec<f64> = (0..bd).map(|_| r.gen_range(-2.0..2.0)).collect();
        let emb = |v: Vec<f64>| UtteranceEmbedding { source_dim: v.len(), values: v };
        let mix: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
        let lhs = ds.downsample(&emb(mix)).unwrap();
        let y1 = ds.downsample(&emb(h1)).unwrap();
        let y2 = ds.downsample(&emb(h2)).unwrap();
        for k in 0..dd {
            prop_assert!((lhs[k] - (a * y1[k] + b * y2[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn nce_loss_non_negative_and_monotone(
        pos in prop::collection::vec(0.001f64..0.999, 1..6),
        neg in prop::collection::vec(0.001f64..0.999, 1..6),
        which in 0usize..6,
    ) {
        let l = nce_loss(&pos, &neg).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        let i = which % pos.len();
        let mut up = pos.clone();
        up[i] = (pos[i] + 1.0) / 2.0;
        prop_assert!(nce_loss(&up, &neg).unwrap() < l);
    }

    #[test]
    fn spearman_invariant_under_increasing_transforms(
        xs in prop::collection::vec(0.01f64..5.0, 3..30),
        seed: u64,
    ) {
        let mut r = rng::rng(seed);
        let ys: Vec<f64> = xs.iter().map(|_| r.gen_range(-3.0..3.0)).collect();
        prop_assume!(xs.iter().any(|x| *x != xs[0]) && ys.iter().any(|y| *y != ys[0]));
        let rho = spearman(&xs, &ys).unwrap();
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
        let expd: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
        prop_assert!((spearman(&cubed, &expd).unwrap() - rho).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn bins_partition_the_unit_interval(b in 2usize..20, t in 1e-9f64..=1.0) {
        let spec = BinSpec::uniform(b).unwrap();
        let i = assign_bin(t, &spec).unwrap();
        let (lo, hi) = spec.interval(i);
        prop_assert!(lo <= t && (t < hi || (i == b - 1 && t <= hi)));
        let hits = (0..b).filter(|&j| {
            let (lo, hi) = spec.interval(j);
            lo <= t && (t < hi || (j == b - 1 && t == 1.0))
        }).count();
        prop_assert_eq!(hits, 1);
    }

    #[test]
    fn pair_time_strictly_increasing(k in 2usize..60, a in 0usize..59) {
        prop_assume!(a + 1 < k);
        let t0 = pair_time(a as f64 + 0.5, k).unwrap();
        let t1 = pair_time(a as f64 + 1.0, k).unwrap();
        prop_assert!(t1 > t0 && t0 > 0.0 && t1 <= 1.0);
    }

    #[test]
    fn extract_pairs_reproduce_prefixes(n in 0usize..9) {
        let turns: Vec<String> = (0..n).map(|i| format!("turn {i}")).collect();
        let refs: Vec<&str> = turns.iter().map(String::as_str).collect();
        let d = Dialogue::from_turns("d", &refs);
        let pairs = extract_pairs(&d);
        prop_assert_eq!(pairs.len(), n.saturating_sub(1));
        for (k, p) in pairs.iter().enumerate() {
            let mut prefix = p.context.clone();
            prefix.push(p.response.clone());
            prop_assert_eq!(&prefix[..], &d.utterances[..k + 2]);
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(seed: u64, n in 10usize..40) {
        let c = generate_synthetic(&SyntheticSpec { n_dialogues: n, seed: 5, ..Default::default() }).unwrap();
        let (a, b, t) = split_corpus(&c, SplitFractions { train: 0.6, val: 0.2, test: 0.2 }, seed).unwrap();
        let mut ids: Vec<&str> = a.dialogues.iter().chain(&b.dialogues).chain(&t.dialogues).map(|d| d.id.as_str()).collect();
        prop_assert_eq!(ids.len(), c.len());
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), c.len());
    }
}

fn small_model(kind: ModelKind, seed: u64) -> ScorerModel {
    let cfg = ScorerConfig {
        kind,
        encoder: EncoderSpec {
            embed_dim: 6,
            out_dim: 8,
            ..Default::default()
        },
        model_dim: 4,
        transition_hidden: 4,
        classifier_hidden: 9,
        seed,
        ..Default::default()
    };
    ScorerModel::new(
        cfg,
        Vocab::from_tokens(["a", "b", "c", "d", "e", "f"].map(String::from)),
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_in_open_unit_interval_and_pure(
        seed: u64,
        ctx in prop::collection::vec(tokens_strategy(), 1..5),
        resp in tokens_strategy(),
        flat: bool,
    ) {
        let m = small_model(if flat { ModelKind::FlatRecurrent } else { ModelKind::DialogueAware }, seed);
        let before = m.fingerprint();
        let context: Vec<Utterance> = ctx.into_iter().map(utt).collect();
        let r = utt(resp);
        let s = m.score(&context, &r).unwrap().value();
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert_eq!(s.to_bits(), m.score(&context, &r).unwrap().value().to_bits());
        prop_assert_eq!(m.delta(&context, &r, &r).unwrap(), 0.0);
        prop_assert_eq!(before, m.fingerprint());
    }

    #[test]
    fn pooled_state_dominates_turn_states(seed: u64, ctx in prop::collection::vec(tokens_strategy(), 1..6)) {
        let m = small_model(ModelKind::DialogueAware, seed);
        let context: Vec<Utterance> = ctx.into_iter().map(utt).collect();
        let st = m.context_states(&context).unwrap();
        for h in &st.turn_states {
            prop_assert!(h.iter().zip(&st.pooled).all(|(a, p)| a <= p));
        }
    }

    #[test]
    fn tiny_step_never_raises_batch_loss(seed: u64) {
        let mut m = small_model(ModelKind::DialogueAware, seed);
        let context = [utt(vec!["a".into(), "b".into()]), utt(vec!["c".into()])];
        let pos: Vec<String> = vec!["d".into(), "e".into()];
        let neg: Vec<String> = vec!["e".into(), "d".into(), "d".into()];
        let examples: Vec<(&[String], bool)> = vec![(&pos, true), (&neg, false)];
        let before = m.pair_loss(&context, &examples).unwrap();
        let hp = Hyperparams { learning_rate: 1e-6, ..Default::default() };
        single_step(&mut m, &context, &examples, &hp).unwrap();
        prop_assert!(m.pair_loss(&context, &examples).unwrap() <= before + 1e-6);
    }

    #[test]
    fn aggregate_within_turn_score_range(scores in prop::collection::vec(0.01f64..0.99, 1..10)) {
        struct Table;
        impl ResponseScorer for Table {
            fn score_pair(&self, _: &[Utterance], r: &Utterance) -> dialogue_metric::Result<f64> {
                Ok(r.tokens[0].parse().unwrap())
            }
        }
        let mut turns = vec!["start".to_string()];
        turns.extend(scores.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = turns.iter().map(String::as_str).collect();
        let d = Dialogue::from_turns("d", &refs);
        let agg = aggregate_dialogue_score(&Table, &d, None).unwrap();
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(agg >= lo - 1e-12 && agg <= hi + 1e-12);
    }
}

fn synthetic_fixture() -> (Corpus, TemplateGenerator, SynonymParaphraser) {
    let spec = SyntheticSpec {
        n_dialogues: 10,
        ..Default::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    let g = TemplateGenerator::from_corpus(&c).unwrap();
    (c, g, SynonymParaphraser::new(synthetic_synonyms(&spec), 0.3))
}

#[test]
fn no_syntactic_negative_equals_truth_and_batch_size_is_fixed() {
    let (c, g, p) = synthetic_fixture();
    for regime in [Regime::SyntaxOnly, Regime::SemanticsOnly, Regime::Both] {
        for k in 1..3 {
            let policy = SamplingPolicy {
                regime,
                negatives_per_positive: k,
                ..Default::default()
            };
            for (i, pair) in c.pairs().iter().enumerate() {
                let b = make_batch(pair, &policy, &c, &g, &p, i as u64).unwrap();
                assert_eq!(b.len(), policy.batch_size());
                for e in &b {
                    let syntactic = matches!(
                        e.provenance,
                        Provenance::WordDrop | Provenance::WordOrder | Provenance::WordRepeat
                    );
                    let distinct = pair.response.tokens.iter().any(|t| *t != pair.response.tokens[0]);
                    if syntactic && pair.response.len() >= 2 && (distinct || e.provenance != Provenance::WordOrder) {
                        assert_ne!(e.response.tokens, pair.response.tokens, "{:?}", e.provenance);
                    }
                }
            }
        }
    }
}

#[test]
fn corpus_load_save_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic(&SyntheticSpec {
        n_dialogues: 15,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    save_corpus(&c, &p1).unwrap();
    let once = load_corpus(&p1).unwrap();
    assert_eq!(once.dialogues, c.dialogues);
    save_corpus(&once, &p2).unwrap();
    assert_eq!(load_corpus(&p2).unwrap().dialogues, once.dialogues);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn synthetic_generation_is_pure() {
    let spec = SyntheticSpec {
        n_dialogues: 30,
        seed: 77,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_corpus(&generate_synthetic(&spec).unwrap(), &a).unwrap();
    save_corpus(&generate_synthetic(&spec).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

fn blobs(seed: u64) -> Vec<(Vec<f64>, usize)> {
    let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut r = rng::rng(seed);
    let mut out = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..50 {
            let mut x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.5..1.5)).collect();
            x[0] += centre[0];
            x[1] += centre[1];
            out.push((x, c));
        }
    }
    out
}

#[test]
fn lda_translation_and_affine_invariance() {
    let pts = blobs(4);
    let fit = fit_lda_2d(&pts).unwrap();
    let shift: Vec<f64> = vec![3.0, -7.0, 100.0, 0.5, -2.0];
    let moved: Vec<_> = pts
        .iter()
        .map(|(x, y)| (x.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<f64>>(), *y))
        .collect();
    let fit2 = fit_lda_2d(&moved).unwrap();
    for (p, q) in fit.projected.iter().zip(&fit2.projected) {
        assert!(
            (p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6,
            "{p:?} vs {q:?}"
        );
    }
    // Invertible affine map: upper-triangular with non-zero diagonal, plus shift.
    let mut r = rng::rng(9);
    let a: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            (0..5)
                .map(|j| {
                    if j < i {
                        0.0
                    } else if j == i {
                        1.0 + r.gen_range(0.5..2.0)
                    } else {
                        r.gen_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let mapped: Vec<_> = pts
        .iter()
        .map(|(x, y)| {
            let z: Vec<f64> = (0..5)
                .map(|i| (0..5).map(|j| a[i][j] * x[j]).sum::<f64>() + shift[i])
                .collect();
            (z, *y)
        })
        .collect();
    let fit3 = fit_lda_2d(&mapped).unwrap();
    assert!((fit.accuracy(&pts) - fit3.accuracy(&mapped)).abs() < 1e-6);
}

#[test]
fn lda_on_permuted_labels_is_near_chance() {
    let mut pts = blobs(6);
    let mut labels: Vec<usize> = pts.iter().map(|p| p.1).collect();
    rng::shuffle(&mut rng::rng(7), &mut labels);
    for (p, l) in pts.iter_mut().zip(labels) {
        p.1 = l;
    }
    let (fit_half, eval_half): (Vec<_>, Vec<_>) = pts.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
    let fit_half: Vec<_> = fit_half.into_iter().map(|p| p.1).collect();
    let eval_half: Vec<_> = eval_half.into_iter().map(|p| p.1).collect();
    let acc = fit_lda_2d(&fit_half).unwrap().accuracy(&eval_half);
    assert!((acc - 1.0 / 3.0).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn spearman_brute_force_oracle_with_ties() {
    // Independent oracle: ranks by counting, then the textbook Pearson formula.
    let xs = [1.0, 2.0, 2.0, 4.0];
    let ys = [1.0, 3.0, 2.0, 4.0];
    let rank = |v: &[f64], x: f64| {
        let less = v.iter().filter(|&&y| y < x).count() as f64;
        let eq = v.iter().filter(|&&y| y == x).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let rx: Vec<f64> = xs.iter().map(|&x| rank(&xs, x)).collect();
    let ry: Vec<f64> = ys.iter().map(|&y| rank(&ys, y)).collect();
    let n = 4.0;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    let oracle = cov / (vx * vy).sqrt();
    assert!((spearman(&xs, &ys).unwrap() - oracle).abs() < 1e-12);
    assert!(matches!(spearman(&[1.0, 2.0], &[2.0, 1.0]), Err(Error::Correlation(_))));
}
