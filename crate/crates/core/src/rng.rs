//! Seeding conventions.
//!
//! Every random stream in the crate is a ChaCha8 generator (`rand_chacha`)
//! whose 64-bit seed is derived from a base seed and a list of stream
//! identifiers through SplitMix64 mixing. Only `u64` and `f64` draws are
//! used, so outputs do not depend on the platform's pointer width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used when deriving seeds, so unrelated streams never collide.
pub mod stream {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const INIT: u64 = 0x494e_4954;
    pub const NEGATIVES: u64 = 0x4e45_4741;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const VALIDATION: u64 = 0x5641_4c49;
    pub const EVAL: u64 = 0x4556_414c;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const SYNTH: u64 = 0x5359_4e54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with stream identifiers into a new 64-bit seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, parts: &[u64]) -> StreamRng {
    rng(derive(base, parts))
}

/// Uniform index in `0..n`. Panics if `n == 0`.
pub fn below<R: Rng>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "below(0)");
    rng.gen_range(0..n as u64) as usize
}

/// Uniform in `[0, 1)`.
pub fn unit<R: Rng>(rng: &mut R) -> f64 {
    rng.gen::<f64>()
}

pub fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    unit(rng) < p
}

/// Fisher-Yates shuffle drawing only `u64` indices.
pub fn shuffle<T, R: Rng>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
