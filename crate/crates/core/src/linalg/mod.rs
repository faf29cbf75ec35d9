//! Dense `f64` matrices and vectors, symmetric solves and spectral norms.
//!
//! Everything in the editing pipeline is expressed with the two types
//! defined here. Matrices are row-major. Both types refuse non-finite data
//! at construction; arithmetic that could overflow is rechecked by the
//! callers that care (the solvers).

pub(crate) mod kernels;
mod matrix;
mod solve;
mod spectral;
mod vector;

pub use matrix::Matrix;
pub use solve::{cholesky, solve_right, ridge_epsilon};
pub use spectral::{spectral_norm, SPECTRAL_MAX_ITERS, SPECTRAL_REL_TOL};
pub use vector::{cosine, Vector};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("solve_right: system is singular even after ridge regularization (epsilon = {epsilon:e})")]
    Singular { epsilon: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

pub(crate) fn dims(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}
