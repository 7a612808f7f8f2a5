use std::path::PathBuf;

/// Errors raised anywhere in the crate.
///
/// Each variant maps onto one process exit code (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("non-finite value produced by `{op}` in `{scope}`")]
    NonFinite { op: &'static str, scope: String },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension { op, msg: msg.into() }
    }

    /// Wraps an I/O failure with the path it concerned.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 usage/config, 3 ingestion, 4 numeric, 5 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Usage(_) | Error::Config(_) => 2,
            Error::Ingestion(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::GradientCheck(_) => 4,
            Error::Checkpoint(_) => 5,
        }
    }

    /// Short machine-parsable tag printed in front of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "E2-dimension",
            Error::Usage(_) => "E2-usage",
            Error::Config(_) => "E2-config",
            Error::Ingestion(_) => "E3-ingestion",
            Error::Io { .. } => "E3-io",
            Error::NonFinite { .. } => "E4-numeric",
            Error::GradientCheck(_) => "E4-gradcheck",
            Error::Checkpoint(_) => "E5-checkpoint",
        }
    }
}
