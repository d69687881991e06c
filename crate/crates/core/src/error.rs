//! Error types shared across the crate.
//!
//! Domain violations (a natural parameter outside the family's domain) are kept
//! distinct from moment-range violations (an averaged or empirical moment with
//! no matching parameter) so callers can tell bad parameters from bad data.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("natural parameter outside the family domain: {0}")]
    DomainViolation(String),

    #[error("moment vector outside the moment range: {0}")]
    MomentRange(String),

    #[error("empty sample")]
    EmptySample,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mixed parameterizations: {0}")]
    MixedParameterizations(String),

    #[error("embedding rank deficient: {0}")]
    RankDeficient(String),

    #[error("matrix not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
