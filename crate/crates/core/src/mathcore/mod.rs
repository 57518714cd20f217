//! Dense float64 numerics: matrices, stable reductions, PSD matrix
//! functions, seeded randomness and the gradient engine.

mod grad;
mod graph;
mod linalg;
mod matrix;
mod rng;

pub use grad::{eval, fd_grad, fd_grad_with, grad, max_relative_error, GradResult};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use linalg::{
    check_psd, log_softmax, logsumexp, psd_sqrt, symmetric_eigen, unit_normalize,
    unit_normalize_eps, EPS_NORM, PSD_TOL,
};
pub use matrix::{dot, norm2, Matrix};
pub use rng::{Rng, RngState};
