//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! to act on: offending points for assumption violations, residual histories
//! for non-converging iterations, field names for configuration errors.

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or structural parameter is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A standing assumption on the coefficients fails at a concrete point.
    #[error("assumption violated at x = {point:?}: {what}")]
    AssumptionViolation { what: String, point: Vec<f64> },

    /// Grid or quadrature resolution is insufficient for the request.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// A linear solve failed to reach its tolerance.
    #[error("linear solver stalled: {what} (relative residual {residual:.3e} after {iterations} iterations)")]
    Solver {
        what: String,
        residual: f64,
        iterations: usize,
    },

    /// An explicit or implicit time-stepper lost stability.
    #[error("time-stepping instability: {0}; reduce the step size")]
    Stability(String),

    /// A fixed-point iteration exceeded its cap without contracting.
    #[error("iteration did not converge: {what}; residual history {history:?}")]
    NonConvergence { what: String, history: Vec<f64> },

    /// Requested evaluation lies outside the resolvable regularity range.
    #[error("regularity error: {0}")]
    Regularity(String),

    /// Diffusion degeneracy detected where ellipticity is required.
    #[error("degenerate diffusion: {0}")]
    Degenerate(String),

    /// Scenario configuration rejected; names the offending field.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed on-disk artifact (grid file, map manifest, mesh CSV).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
