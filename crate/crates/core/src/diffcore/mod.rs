//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Inputs, NoInputs, Var};
pub use tensor::Tensor;
