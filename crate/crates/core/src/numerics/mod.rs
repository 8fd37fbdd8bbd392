//! Dense tensors, reverse-mode differentiation and a finite-difference checker.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_difference_gradient, grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
