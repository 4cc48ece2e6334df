//! Dense tensors, a reverse-mode tape, a finite-difference checker and a
//! text checkpoint container.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, SparseMatrix, Var, LAYER_NORM_EPS, NORM_EPS_SQ};
pub use tensor::{ParamSet, Tensor};

#[cfg(test)]
mod tests;
