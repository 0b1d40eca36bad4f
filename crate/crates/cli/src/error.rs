use thiserror::Error;
use tpa_transport::error::TransportError;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    /// Runtime failure not covered below: IO, a busy output directory, or a
    /// failed verification check.
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
    pub const DATA: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("{0}")]
    Failed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Transport(e) => match e {
                TransportError::Parameter(_)
                | TransportError::Validation(_)
                | TransportError::Domain(_) => exit::CONFIG,
                TransportError::Supercritical { .. }
                | TransportError::Convergence { .. }
                | TransportError::Divergence { .. } => exit::CONVERGENCE,
                TransportError::DataInconsistency(_)
                | TransportError::AllMasked(_)
                | TransportError::Format { .. } => exit::DATA,
                TransportError::Invariant(_) | TransportError::Io { .. } => exit::FAILURE,
            },
            CliError::Failed(_) | CliError::Io { .. } => exit::FAILURE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
