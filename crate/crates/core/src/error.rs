use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = G2rError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum G2rError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("malformed binary file: {0}")]
    Format(String),
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: String },
    #[error("hash mismatch for {artifact}: expected {expected}, found {found}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

impl G2rError {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            G2rError::Io { .. } => "io",
            G2rError::Parse { .. } => "parse",
            G2rError::Empty(_) => "empty",
            G2rError::InvalidArgument(_) => "invalid_argument",
            G2rError::ShapeMismatch { .. } => "shape_mismatch",
            G2rError::VocabMismatch(_) => "vocab_mismatch",
            G2rError::Format(_) => "format",
            G2rError::NonFiniteLoss { .. } => "non_finite_loss",
            G2rError::HashMismatch { .. } => "hash_mismatch",
            G2rError::MissingArtifact(_) => "missing_artifact",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        G2rError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        G2rError::InvalidArgument(message.into())
    }
}
