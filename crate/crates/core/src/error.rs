//! Error type shared by all solver components.

use thiserror::Error;

/// Errors produced by construction, geometry and solver routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes are incompatible with the block structure or with each other.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The stored data fails the symmetry requirement beyond tolerance.
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    /// The point is too far from the manifold.
    #[error("point is not on St(d,p)^m (feasibility residual {0:.3e})")]
    NotFeasible(f64),

    /// The vector fails the tangency condition beyond tolerance.
    #[error("vector is not tangent (residual {0:.3e})")]
    NotTangent(f64),

    /// Two tangent vectors do not share a base point.
    #[error("tangent vectors have different base points")]
    BaseMismatch,

    /// A retraction slice collapsed numerically; the proposed step is invalid.
    #[error("slice {slice} of Y + Z is rank deficient (sigma_min = {sigma_min:.3e})")]
    RankDeficientSlice { slice: usize, sigma_min: f64 },

    /// An iterative eigensolver failed to reach its tolerance.
    #[error("eigenvalue solver did not converge: {0}")]
    EigNonConvergence(String),

    /// Cycle synchronization instance with -1 in the spectrum of the holonomy.
    #[error("cycle product has an eigenphase within {0:.3e} of pi; no principal root exists")]
    Unsolvable(f64),

    /// Non-finite values or a failed factorization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Requested operation is outside the supported regime.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
