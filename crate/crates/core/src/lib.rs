//! Learned, reference-free scoring of dialogue responses.
//!
//! A scorer maps a dialogue context and a candidate response to a value in
//! `(0, 1)`. It is trained with noise-contrastive estimation: true responses
//! against syntactic corruptions (word drop, shuffle, repeat) and semantic
//! negatives (responses from other dialogues, generated responses,
//! paraphrases of other responses).
//!
//! Module map:
//!
//! - [`corpus`]: dialogue ingestion, pair extraction, splits, synthetic corpora
//! - [`sampling`]: negative / positive response generators and batch assembly
//! - [`encoder`]: utterance encoders, the learned downsampler, external adapters
//! - [`scorer`]: the dialogue-aware scorer and the flat baselines
//! - [`training`]: NCE loss, Adam, early stopping, checkpoints
//! - [`eval`]: Δ tables, zero-shot evaluation, human-judgement correlation
//! - [`probe`]: temporal-position probe with a 2D LDA projection
//!
//! Data-parallel loops (per-pair gradients, batch scoring, probe embeddings)
//! run on rayon when the `parallel` feature is enabled (the default) and fall
//! back to plain iterators otherwise. Results are bit-identical either way:
//! reductions always happen sequentially in input order.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod probe;
pub mod rng;
pub mod sampling;
pub mod scorer;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
