//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Everything the model needs and nothing more: 32-bit floats, row-major
//! buffers, a per-pass Wengert tape, and a finite-difference oracle to keep
//! the backward rules honest. No broadcasting beyond bias-add, no GPU, no
//! dynamic graphs.

pub mod grad_check;
pub mod kernels;
mod tape;
mod tensor;

pub use grad_check::{grad_check, grad_check_directional, grad_check_sampled};
pub use tape::Tape;
pub use tensor::Tensor;
