use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the core library.
///
/// Variants group into three families that the CLI maps onto exit codes:
/// configuration problems, data/IO problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values produced by {op}{detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("degenerate embedding: column {index} of {side} has zero norm")]
    DegenerateColumn { side: &'static str, index: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward was already run on this graph")]
    GraphConsumed,

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("audio error for {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or arguments.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_))
    }

    /// True for errors caused by unreadable or malformed data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Audio { .. } | Error::Manifest { .. } | Error::Io { .. } | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
