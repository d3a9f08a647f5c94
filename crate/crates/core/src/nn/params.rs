use std::ops::Range;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::rng::{self, StreamRng};

/// Location of one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// All learned parameters of a model, flattened into one buffer.
///
/// Layers hold [`Slot`]s into the buffer. Gradients use a buffer of the same
/// length, so optimizers and finite-difference checks work on flat indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a tensor initialized uniformly in `±1/sqrt(fan_in)`.
    /// Values are rounded to `f32` so checkpoints store them exactly.
    pub fn alloc_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Slot {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let values = (0..len)
            .map(|_| {
                let v = rng.gen_range(-bound..bound);
                v as f32 as f64
            })
            .collect();
        self.push(name, shape, values)
    }

    pub fn alloc_zeros(&mut self, name: &str, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        self.push(name, shape, vec![0.0; len])
    }

    fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Slot {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter `{name}`"
        );
        let slot = Slot {
            offset: self.data.len(),
            len: values.len(),
        };
        self.data.extend(values);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            slot,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.data[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.range()]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over names, shapes and `f64` bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &self.data[e.slot.range()] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Initializer stream for a model built from `seed`.
pub fn init_rng(seed: u64) -> StreamRng {
    rng::rng_for(seed, &[rng::stream::INIT])
}
