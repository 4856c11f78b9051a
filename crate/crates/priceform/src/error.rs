//! Error type shared across the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, solvers, estimators, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A simulated or supplied value became non-finite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Division by a (numerically) zero volatility during noise recovery.
    #[error("volatility vanishes at step {step} (|sigma| = {value:.3e})")]
    ZeroVolatility { step: usize, value: f64 },

    /// A requested problem size exceeds a hard capacity bound.
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    /// Backward integration hit the removable singularity of the value
    /// expansion (the denominator coefficient reached -1).
    #[error("coefficient system singular at t = {t:.6}: a2_4 + 1 = {value:.3e}")]
    SingularCoefficient { t: f64, value: f64 },

    /// Backward integration produced non-finite coefficients.
    #[error("coefficient system blew up at t = {t:.6}")]
    CoefficientBlowUp { t: f64 },

    /// Closed-form expressions are only valid on part of parameter space.
    #[error("closed form not available: {0}")]
    ClosedFormDomain(String),

    /// An iterative solver failed to reach the requested tolerance.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations (tolerance {tolerance:.3e})")]
    NoConvergence {
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },

    /// A statistical estimator received degenerate data.
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// A least-squares or linear system was rank deficient.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// Two objects that must share a grid or shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed input data (CSV records, grids, etc.).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parse/serialize failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// JSON parse/serialize failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
