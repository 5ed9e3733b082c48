//! Streaming monotonic attention for online transformer decoding.
//!
//! The crate provides the accumulation-and-halt cross-attention (DACS) in
//! both its step-wise inference form and its matrix training form, the
//! baseline monotonic mechanisms (HMA, MoChA, sMoChA, MTA), a chunkwise
//! self-attention encoder, a small trainable encoder-decoder with
//! reverse-mode gradients, a synthetic alignment task, and cost/latency
//! metrics.

pub mod attn;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matrix;
pub mod mechanism;
pub mod metrics;
pub mod model;
pub mod monotonic;
pub mod parallel;
pub mod streaming;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mechanism::{Lookahead, MechanismConfig};
pub use model::{Model, ModelConfig};
pub use streaming::{decode_utterance, DecodeMode};
