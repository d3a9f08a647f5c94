//! Central finite-difference gradient probes.

use crate::nn::params::ParamStore;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compares `analytic[i]` with `(L(θ+h e_i) - L(θ-h e_i)) / 2h` for each index.
pub fn probe<F>(params: &ParamStore, loss: F, analytic: &[f64], indices: &[usize], step: f64) -> Vec<Probe>
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = params.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = work.data()[i];
            work.data_mut()[i] = orig + step;
            let plus = loss(&work);
            work.data_mut()[i] = orig - step;
            let minus = loss(&work);
            work.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            Probe {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric),
            }
        })
        .collect()
}

/// Picks `n` distinct indices whose analytic gradient is clearly non-zero,
/// drawn from `candidates` (all indices when empty).
pub fn pick_indices(analytic: &[f64], candidates: &[usize], n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut pool: Vec<usize> = if candidates.is_empty() {
        (0..analytic.len()).collect()
    } else {
        candidates.to_vec()
    };
    pool.retain(|&i| analytic[i].abs() > 1e-6);
    rng::shuffle(rng, &mut pool);
    pool.truncate(n);
    pool
}
