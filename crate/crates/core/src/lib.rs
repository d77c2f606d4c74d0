//! Long-context autoregressive modeling of raw audio waveforms.
//!
//! A waveform is quantized to 256 μ-law codes and modeled one sample at a
//! time. The context — up to hundreds of thousands of past samples — is cut
//! into non-overlapping 2000-sample chunks, a shared convolutional encoder
//! compresses each chunk into one latent token, and a Transformer encoder
//! attends over the short token sequence; the final token feeds a
//! classification head over the next-sample codes. A 128,000-sample context
//! is 64 tokens, half a million samples are 250.
//!
//! The crate is self-contained: its own dense-tensor/reverse-mode core
//! ([`numerics`]), audio ingestion and windowing ([`audio`]), the model
//! ([`model`]), Adam training with deterministic gradient sharding and
//! bit-exact checkpoints ([`train`]), and autoregressive sampling
//! ([`generate`]). All randomness flows from one root seed ([`rng`]), so
//! runs are reproducible bit for bit.
//!
//! The `book/` directory in the repository walks through the concepts; its
//! code snippets are compiled as doc-tests.

pub mod audio;
pub mod config;
mod error;
pub mod generate;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
