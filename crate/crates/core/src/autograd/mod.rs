//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::backward`]
//! walks the recorded nodes once, newest first, and returns the gradient of a
//! scalar loss with respect to every node that needs one. Parameters live
//! outside the tape as [`Tensor`]s and are bound as leaves for each step.

mod adam;
pub mod checkpoint;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
