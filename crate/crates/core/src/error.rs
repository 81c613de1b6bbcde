use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A documented precondition of an operation was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("malformed caption: {0}")]
    Caption(String),

    #[error("oracle response rejected after {attempts} attempts: {reason}")]
    OracleSchema {
        attempts: usize,
        reason: String,
        raw: String,
    },

    #[error("oracle transport: {0}")]
    Transport(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Shape { .. } => "shape",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::UnknownToken(_) => "unknown_token",
            Error::Caption(_) => "caption",
            Error::OracleSchema { .. } => "oracle_schema",
            Error::Transport(_) => "transport",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
