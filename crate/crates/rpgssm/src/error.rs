//! Error type shared across the crate.
//!
//! Data-dependent failures (indefinite matrices, unstable systems, non-finite
//! arithmetic) surface as [`Error`] values; programmer errors such as calling
//! an operation with impossible shapes panic via assertions instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be symmetric positive definite failed its Cholesky
    /// factorization (or an explicit definiteness check).
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Operands with incompatible dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A transition matrix outside the stability region.
    #[error("unstable system: {0}")]
    Unstable(String),

    /// NaN or infinity produced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A structurally invalid argument (empty architecture, bad flag value, …).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical breakdown inside a sequential recursion, reported with the
    /// time index at which the recursion failed.
    #[error("numerical breakdown at time step {time}: {message}")]
    Breakdown { time: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
