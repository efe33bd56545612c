//! Language-modeling laboratory for vector-quantized output layers.
//!
//! The output projection of a language model is replaced by a small codebook
//! `C` of `K` vectors plus a fixed token-to-code mapping `M`. Logits are
//! computed over the codebook and scattered to the full vocabulary. The crate
//! ships that head next to full-softmax, low-rank, adaptive-softmax and tied
//! baselines, a small transformer body with a tape-based autodiff engine,
//! k-means codebook construction, training, and cost accounting.

mod error;

pub mod bench;
pub mod data;
pub mod heads;
pub mod inspect;
pub mod model;
pub mod numerics;
pub mod quantize;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub(crate) use error::bail;
