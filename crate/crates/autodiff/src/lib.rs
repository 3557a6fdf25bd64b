//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] sweeps the
//! record in reverse and returns gradients for every differentiable leaf.

mod check;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use check::gradient_check;
pub use error::{Result, TensorError};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, numel, Tensor};
