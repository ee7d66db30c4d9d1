//! Dense tensors with reverse-mode differentiation, Adam, and a
//! finite-difference gradient auditor.

mod adam;
mod broadcast;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, BlockReport, GradCheckOptions, GradCheckReport};
pub use graph::{BinaryKind, FrozenValues, Graph, UnaryKind, Var};
pub use tensor::Tensor;

