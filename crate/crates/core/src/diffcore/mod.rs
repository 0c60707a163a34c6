//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records tensor-level operations (first-dimension matrix
//! products, masked block means, elementwise maps, reductions) and replays
//! them in reverse. [`fd_check`] compares the result against central
//! differences, skipping coordinates whose perturbation crosses a ReLU,
//! max or clamp kink.

mod fdcheck;
mod tape;
mod tensor;

pub use fdcheck::{fd_check, rel_err, FdOptions, FdReport, Probe};
pub use tape::{Gradients, MaskedSet, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
