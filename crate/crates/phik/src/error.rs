//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors produced by construction, factorization, fitting, and I/O.
#[derive(Debug, Error)]
pub enum PhikError {
    /// A vector or matrix argument has the wrong length/shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Invalid argument outside of plain shape errors (bad bounds, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two locations in a point set compare exactly equal; the covariance
    /// matrix of such a set is singular.
    #[error("duplicate location: points {first} and {second} are identical")]
    DuplicateLocation { first: usize, second: usize },

    /// A kernel or model evaluation produced NaN/inf.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Cholesky factorization failed at the largest regularization tried.
    #[error("covariance matrix is numerically singular (Cholesky failed at alpha = {alpha:e})")]
    SingularCovariance { alpha: f64 },

    /// An observation or query location is not a member of the ensemble's
    /// location set (ensemble models are defined only at their own nodes).
    #[error("location ({x}, {y}) is not in the ensemble location set")]
    LocationNotInSet { x: f64, y: f64 },

    /// Hyperparameter estimation failed (no feasible start, degenerate data).
    #[error("kriging fit failed: {0}")]
    FitFailure(String),

    /// A realization violates the hypothesis of a constraint-preservation
    /// check (e.g. its boundary residual exceeds the stated tolerance).
    #[error(
        "constraint precondition violated by realization {realization}: \
         residual {residual:e} exceeds tolerance {tolerance:e}"
    )]
    ConstraintPrecondition {
        realization: usize,
        residual: f64,
        tolerance: f64,
    },

    /// Grids that must agree (bounds, shape, level layout) do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed CSV or numeric text.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PhikError>;
