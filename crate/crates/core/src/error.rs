use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Every hypothesis has zero evidence (all log weights are `-inf`).
    #[error("degenerate evidence: all hypotheses have zero posterior weight")]
    DegenerateEvidence,

    /// Adaptive quadrature did not reach the requested tolerance.
    #[error("quadrature failed: no agreement to {rel_tol:e} after {refinements} refinements (z = {z})")]
    QuadratureFailed {
        z: f64,
        rel_tol: f64,
        refinements: usize,
    },

    /// Inverse-gamma posterior shape too small for a finite variance.
    #[error("prior too heavy-tailed: posterior shape {shape} must exceed 2")]
    PriorTooHeavyTailed { shape: f64 },

    /// A configuration value violates its invariant.
    #[error("{field} {message}")]
    Validation { field: String, message: String },

    /// Too many trajectories hit the sample cap.
    #[error("cap-hit rate {rate:e} exceeds 1e-4 ({capped} of {runs} runs reached n_max)")]
    CapHit { capped: u64, runs: u64, rate: f64 },

    #[error("design did not converge after {iterations} iterations (best max normalized violation {violation:.3})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
