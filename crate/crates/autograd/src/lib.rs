//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Everything runs in double precision. Backward rules are built from the same
//! differentiable operations as the forward pass, so [`grad`] with
//! `create_graph = true` yields gradients that can be differentiated again
//! (needed for gradient penalties).

pub mod conv;
pub mod linear;
pub mod matmul;
pub mod ops;
mod optim;
mod tensor;
mod var;

pub use conv::{conv2d, conv2d_input_grad, conv2d_weight_grad};
pub use linear::{linear, LinearMap, PadMode};
pub use matmul::matmul;
pub use optim::Adam;
pub use tensor::Tensor;
pub use var::{grad, grad_values, graph_ops, is_grad_enabled, no_grad, BackwardCtx, GradModeGuard, Var};
