//! Temporal-structure probe: embed consecutive utterance pairs, label them by
//! relative position in the dialogue, project to 2D with LDA and measure how
//! well nearest-centroid classification recovers the position bin.
//!
//! Utterance indices are zero-based; a pair's time is
//! `t = (index_avg + 1) / k` for a dialogue of `k` utterances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, stream};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPosition {
    pub dialogue_id: String,
    pub index_avg: f64,
    pub k: usize,
    pub t: f64,
}

pub fn pair_time(index_avg: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Argument(format!("pair_time needs k >= 2, got {k}")));
    }
    if !(index_avg >= 0.0 && index_avg <= (k - 1) as f64) {
        return Err(Error::Argument(format!("index_avg {index_avg} outside [0, {}]", k - 1)));
    }
    Ok((index_avg + 1.0) / k as f64)
}

/// `B` ordered half-open intervals `[lo, hi)` covering `(0, 1]`; the last
/// interval also contains 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    edges: Vec<f64>,
}

impl BinSpec {
    pub fn uniform(b: usize) -> Result<Self> {
        if b < 2 {
            return Err(Error::Argument(format!("need at least 2 bins, got {b}")));
        }
        Ok(BinSpec {
            edges: (0..=b).map(|i| i as f64 / b as f64).collect(),
        })
    }

    /// Custom boundaries: strictly increasing, starting at 0 and ending at 1.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        let ok = edges.len() >= 3
            && edges[0] == 0.0
            && *edges.last().expect("non-empty") == 1.0
            && edges.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Argument(
                "bin edges must rise strictly from 0 to 1 with at least 2 bins".into(),
            ));
        }
        Ok(BinSpec { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }
}

pub fn assign_bin(t: f64, bins: &BinSpec) -> Result<usize> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Argument(format!("t = {t} is outside (0, 1]")));
    }
    let last = bins.len() - 1;
    Ok((0..last).find(|&i| t < bins.edges[i + 1]).unwrap_or(last))
}

/// Concatenation of the two utterance embeddings.
pub fn pair_embedding(enc: &Encoder, a: &Utterance, b: &Utterance) -> Result<Vec<f64>> {
    let mut v = enc.encode_utterance(a)?.values;
    v.extend(enc.encode_utterance(b)?.values);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaFit {
    pub mean: Vec<f64>,
    /// Two discriminant directions, each of input dimension.
    pub directions: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub centroids: BTreeMap<usize, [f64; 2]>,
    /// Diagonal ridge added to the within-class scatter (0 if none).
    pub ridge: f64,
    pub projected: Vec<[f64; 2]>,
}

impl LdaFit {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, w) in out.iter_mut().zip(&self.directions) {
            *o = x.iter().zip(&self.mean).zip(w).map(|((x, m), w)| (x - m) * w).sum();
        }
        out
    }

    pub fn classify(&self, p: [f64; 2]) -> usize {
        let d2 = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        *self
            .centroids
            .iter()
            .min_by(|a, b| d2(a.1).total_cmp(&d2(b.1)).then(a.0.cmp(b.0)))
            .expect("fit has centroids")
            .0
    }

    /// Nearest-centroid accuracy on labelled points.
    pub fn accuracy(&self, points: &[(Vec<f64>, usize)]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points
            .iter()
            .filter(|(x, y)| self.classify(self.project(x)) == *y)
            .count();
        hits as f64 / points.len() as f64
    }
}

fn cholesky_ok(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let c = m.clone().cholesky()?;
    let diag = c.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    (lo > 0.0 && (lo / hi).powi(2) > 1e-12).then_some(c)
}

/// Multiclass LDA onto the top two discriminant directions.
///
/// Solves `S_b w = λ S_w w` through the Cholesky factor of `S_w`. A singular
/// `S_w` gets `1e-6 * trace / D` added to its diagonal.
pub fn fit_lda_2d(points: &[(Vec<f64>, usize)]) -> Result<LdaFit> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, y) in points {
        *counts.entry(*y).or_default() += 1;
    }
    if counts.values().filter(|&&c| c >= 3).count() < 3 {
        return Err(Error::Probe(format!(
            "LDA to 2D needs at least 3 classes with 3+ samples each (class sizes {counts:?}); use more bins or more data"
        )));
    }
    let d = points[0].0.len();
    if points.iter().any(|(x, _)| x.len() != d) {
        return Err(Error::Shape("probe points have mixed dimensions".into()));
    }
    let n = points.len() as f64;
    let mut mean = DVector::zeros(d);
    let mut class_sum: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (x, y) in points {
        let x = DVector::from_column_slice(x);
        mean += &x;
        *class_sum.entry(*y).or_insert_with(|| DVector::zeros(d)) += x;
    }
    mean /= n;
    let class_mean: BTreeMap<usize, DVector<f64>> =
        class_sum.into_iter().map(|(y, s)| (y, s / counts[&y] as f64)).collect();
    let mut sw = DMatrix::zeros(d, d);
    for (x, y) in points {
        let r = DVector::from_column_slice(x) - &class_mean[y];
        sw.ger(1.0, &r, &r, 1.0);
    }
    let mut sb = DMatrix::zeros(d, d);
    for (y, m) in &class_mean {
        let r = m - &mean;
        sb.ger(counts[y] as f64, &r, &r, 1.0);
    }
    let trace = sw.trace();
    if trace.is_nan() || trace <= 0.0 {
        return Err(Error::DegenerateScatter(
            "within-class scatter is zero: all points in each class coincide".into(),
        ));
    }
    let mut ridge = 0.0;
    let chol = match cholesky_ok(&sw) {
        Some(c) => c,
        None => {
            ridge = 1e-6 * trace / d as f64;
            let reg = &sw + DMatrix::identity(d, d) * ridge;
            cholesky_ok(&reg)
                .ok_or_else(|| Error::DegenerateScatter("within-class scatter stays singular after ridge".into()))?
        }
    };
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateScatter("Cholesky factor is not invertible".into()))?;
    let m = &l_inv * &sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let direction = |k: usize| -> Vec<f64> {
        let v = eig.eigenvectors.column(order[k]).into_owned();
        let w = l_inv.transpose() * v;
        let mut w: Vec<f64> = w.iter().copied().collect();
        let scale = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let sign = w.iter().find(|x| x.abs() > 1e-9 * scale).map_or(1.0, |x| x.signum());
        for x in &mut w {
            *x *= sign;
        }
        w
    };
    let directions = [direction(0), direction(1)];
    let eigenvalues = [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]];
    let mut fit = LdaFit {
        mean: mean.iter().copied().collect(),
        directions,
        eigenvalues,
        centroids: BTreeMap::new(),
        ridge,
        projected: Vec::new(),
    };
    fit.projected = points.iter().map(|(x, _)| fit.project(x)).collect();
    let mut sums: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    for (p, (_, y)) in fit.projected.iter().zip(points) {
        let s = sums.entry(*y).or_default();
        s[0] += p[0];
        s[1] += p[1];
    }
    fit.centroids = sums
        .into_iter()
        .map(|(y, s)| {
            let c = counts[&y] as f64;
            (y, [s[0] / c, s[1] / c])
        })
        .collect();
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub dialogue_id: String,
    pub pair_index: usize,
    pub t: f64,
    pub bin: usize,
    pub x: f64,
    pub y: f64,
    /// True for points from dialogues held out of the LDA fit.
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub corpus: String,
    pub n_dialogues: usize,
    pub n_pairs: usize,
    pub bins: usize,
    pub bin_counts: Vec<usize>,
    /// Nearest-centroid accuracy on held-out dialogues.
    pub accuracy: f64,
    /// Accuracy on the dialogues used to fit the projection.
    pub fit_accuracy: f64,
    pub chance: f64,
    pub ridge: f64,
    pub index_origin: String,
    pub seed: u64,
    pub points: Vec<ProbePoint>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dialogue_id,pair_index,t,bin,x,y\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.dialogue_id, p.pair_index, p.t, p.bin, p.x, p.y
            );
        }
        s
    }

    /// Minimal SVG scatter of the projected points, one colour per bin.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 20.0;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let sx = (SIZE - 2.0 * PAD) / (x1 - x0).max(1e-12);
        let sy = (SIZE - 2.0 * PAD) / (y1 - y0).max(1e-12);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        for p in &self.points {
            let hue = 360.0 * p.bin as f64 / self.bins as f64;
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"hsl({hue:.0},70%,45%)\" fill-opacity=\"0.6\"/>",
                PAD + (p.x - x0) * sx,
                SIZE - PAD - (p.y - y0) * sy
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Embeds every consecutive pair, bins by relative position, fits LDA on a
/// seeded half of the dialogues and scores bin prediction on the other half.
pub fn probe_report(corpus: &Corpus, enc: &Encoder, bins: usize, seed: u64) -> Result<ProbeReport> {
    let spec = BinSpec::uniform(bins)?;
    if corpus.len() < 2 {
        return Err(Error::Probe(
            "probe needs at least 2 dialogues (fit and held-out halves)".into(),
        ));
    }
    let first = &corpus.dialogues[0];
    if corpus.dialogues.iter().all(|d| d.utterances == first.utterances) {
        return Err(Error::DegenerateScatter(
            "all dialogues are identical, so every bin collapses to fixed points".into(),
        ));
    }
    let per_dialogue = par::try_map_indexed(&corpus.dialogues, |_, d| {
        let k = d.len();
        (0..k.saturating_sub(1))
            .map(|i| {
                let t = pair_time(i as f64 + 0.5, k)?;
                let bin = assign_bin(t, &spec)?;
                let v = pair_embedding(enc, &d.utterances[i], &d.utterances[i + 1])?;
                Ok((i, t, bin, v))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng::shuffle(&mut rng::rng_for(seed, &[stream::PROBE]), &mut order);
    let mut held_out = vec![false; corpus.len()];
    for &i in &order[corpus.len().div_ceil(2)..] {
        held_out[i] = true;
    }
    let mut fit_points = Vec::new();
    let mut eval_points = Vec::new();
    for (di, pts) in per_dialogue.iter().enumerate() {
        for (_, _, bin, v) in pts {
            if held_out[di] {
                eval_points.push((v.clone(), *bin));
            } else {
                fit_points.push((v.clone(), *bin));
            }
        }
    }
    let fit = fit_lda_2d(&fit_points)?;
    let mut bin_counts = vec![0; bins];
    let mut points = Vec::new();
    for (di, pts) in per_dialogue.iter().enumerate() {
        for (i, t, bin, v) in pts {
            bin_counts[*bin] += 1;
            let [x, y] = fit.project(v);
            points.push(ProbePoint {
                dialogue_id: corpus.dialogues[di].id.clone(),
                pair_index: *i,
                t: *t,
                bin: *bin,
                x,
                y,
                held_out: held_out[di],
            });
        }
    }
    Ok(ProbeReport {
        corpus: corpus.name.clone(),
        n_dialogues: corpus.len(),
        n_pairs: points.len(),
        bins,
        bin_counts,
        accuracy: fit.accuracy(&eval_points),
        fit_accuracy: fit.accuracy(&fit_points),
        chance: 1.0 / bins as f64,
        ridge: fit.ridge,
        index_origin: "zero-based utterance indices, t = (index_avg + 1) / k".into(),
        seed,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pair_time_examples() {
        assert!((pair_time(0.5, 2).unwrap() - 0.75).abs() < 1e-12);
        assert!((pair_time(0.5, 10).unwrap() - 0.15).abs() < 1e-12);
        assert!((pair_time(8.5, 10).unwrap() - 0.95).abs() < 1e-12);
        assert!(pair_time(0.5, 1).is_err());
        assert!(pair_time(-0.5, 4).is_err());
    }

    #[test]
    fn bin_examples() {
        let b = BinSpec::uniform(10).unwrap();
        assert_eq!(assign_bin(0.15, &b).unwrap(), 1);
        assert_eq!(assign_bin(1.0, &b).unwrap(), 9);
        assert_eq!(assign_bin(0.1, &b).unwrap(), 1);
        assert!(assign_bin(0.0, &b).is_err());
        assert!(assign_bin(1.01, &b).is_err());
        assert!(BinSpec::uniform(1).is_err());
        assert!(BinSpec::from_edges(vec![0.0, 0.5, 0.4, 1.0]).is_err());
        assert_eq!(BinSpec::from_edges(vec![0.0, 0.2, 1.0]).unwrap().len(), 2);
    }

    fn blobs(seed: u64) -> Vec<(Vec<f64>, usize)> {
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut r = rng::rng(seed);
        let mut out = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..50 {
                let mut x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
                x[0] += centre[0];
                x[1] += centre[1];
                out.push((x, c));
            }
        }
        out
    }

    #[test]
    fn lda_separates_blobs() {
        let pts = blobs(1);
        let fit = fit_lda_2d(&pts).unwrap();
        assert!(fit.accuracy(&pts) >= 0.98);
        assert_eq!(fit.ridge, 0.0);
    }

    #[test]
    fn lda_rejects_few_classes_and_identical_points() {
        let two: Vec<_> = blobs(2).into_iter().filter(|p| p.1 < 2).collect();
        assert!(matches!(fit_lda_2d(&two), Err(Error::Probe(_))));
        let same: Vec<_> = (0..12).map(|i| (vec![1.0, 2.0, 3.0], i % 3)).collect();
        assert!(matches!(fit_lda_2d(&same), Err(Error::DegenerateScatter(_))));
    }

    #[test]
    fn lda_ridge_on_rank_deficient_scatter() {
        // Sixth coordinate is constant: S_w is singular but trace > 0.
        let pts: Vec<_> = blobs(3)
            .into_iter()
            .map(|(mut x, y)| {
                x.push(4.0);
                (x, y)
            })
            .collect();
        let fit = fit_lda_2d(&pts).unwrap();
        assert!(fit.ridge > 0.0);
        assert!(fit.accuracy(&pts) >= 0.98);
    }
}
