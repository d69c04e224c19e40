use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: u32, num_classes: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("labels are unavailable for this dataset")]
    LabelUnavailable,

    #[error("partition failed: {0}")]
    PartitionFailed(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u64, reason: String },

    #[error("oracle rule requires the true label")]
    MissingOracleLabel,

    #[error("config hash mismatch in {path}: expected {expected:016x}, found {found:016x}")]
    ConfigMismatch { path: PathBuf, expected: u64, found: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
