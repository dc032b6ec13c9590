//! Reverse-mode autodiff and the neural layers the denoiser is built from.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use layers::{BoundParams, ParamStore};
pub use tensor::Tensor;
