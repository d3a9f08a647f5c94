//! Minimal dense layers with hand-written backpropagation.
//!
//! Forward passes return a cache; backward passes take that cache plus the
//! upstream gradient, accumulate into a flat gradient buffer shaped like the
//! [`ParamStore`], and return the gradient w.r.t. the layer input.

pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod params;

pub use layers::{BiLstm, BiLstmCache, Embedding, Linear, Lstm, LstmCache, Mlp, MlpCache};
pub use params::{ParamEntry, ParamStore, Slot};
