//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then sweeps the tape in reverse. Each graph is confined to one thread, while
//! independent graphs may be built concurrently from shared read-only parameters.

mod check;
mod error;
mod graph;
mod kernels;
mod param;
mod real;
mod tensor;

pub use check::{finite_difference_check, FdProbe, FdReport};
pub use error::{DiffError, Result};
pub use graph::{sigmoid, Graph, Var, MASK_FILL, MIN_DENOMINATOR};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
