//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod finite_diff;
mod graph;
mod tensor;

pub use finite_diff::{finite_diff, max_relative_error, max_tensor_relative_error};
pub(crate) use graph::sigmoid_f64;
pub use graph::{log_sigmoid, log_softmax_rows, Gradients, Graph, Var};
pub use tensor::{relative_error, Tensor};
