//! Small reverse-mode automatic differentiation engine over dense tensors.
//!
//! Every backward rule is expressed with graph operations, so gradients can
//! be taken of gradients (needed for input-gradient penalties).

mod ops;
mod scalar;
mod tensor;
mod var;

pub use ops::PAD;
pub use scalar::Float;
pub use tensor::Tensor;
pub use var::{grad, grad_enabled, no_grad, NoGradGuard, Var};
