//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records one forward evaluation; [`Graph::backward`] sweeps it in
//! reverse and returns parameter gradients. Element type is generic so the
//! same model code runs in `f32` for training and `f64` for gradient checks.

mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use ops::{log_sum_exp, sigmoid, softmax_in_place, softplus};
pub use params::{Init, ParamId, ParamStore};
pub use real::{gemm, Real};
pub use tensor::{strides, Tensor};
