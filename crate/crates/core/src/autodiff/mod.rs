//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod graph;
pub mod gradcheck;
mod linalg;
mod tensor;

pub use graph::{Gradients, Graph, Var, MASK_SENTINEL};
pub use tensor::Tensor;
