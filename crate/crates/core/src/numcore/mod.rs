//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{patch_count, Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_rows;
