use thiserror::Error;

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

/// Failure modes shared by the solvers, reconstructions and IO helpers.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("medium is not subcritical: sup sigma_s/(Sigma_a+sigma_s) = {ratio}")]
    Supercritical { ratio: f64 },

    #[error("{what} did not converge after {iterations} iterations (last gap {last_gap:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        last_gap: f64,
        history: Vec<f64>,
    },

    #[error(
        "{what} diverged: gap grew for {streak} consecutive iterations (last gap {last_gap:e})"
    )]
    Divergence {
        what: &'static str,
        streak: usize,
        last_gap: f64,
        history: Vec<f64>,
    },

    #[error("inconsistent data: {0}")]
    DataInconsistency(String),

    #[error("every cell was masked: {0}")]
    AllMasked(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

impl TransportError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TransportError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        TransportError::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
