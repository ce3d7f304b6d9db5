//! Minimal reverse-mode differentiation: a per-step recording tape over
//! row-major f64 tensors, persistent parameters with gradient storage,
//! momentum SGD, and a finite-difference gradient checker.

mod gradcheck;
mod optimizer;
mod tape;

pub use gradcheck::{compare_with_finite_differences, finite_diff_check, FdReport};
pub use optimizer::{Param, ParamId, ParamSet, Sgd};
pub use tape::{Tape, TensorId};
