use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UumError> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum UumError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("softmax row {row} has no permitted entries")]
    AllMasked { row: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: usize, term: &'static str },

    #[error("{0}")]
    Numeric(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("{failed} of {total} records rejected (first: line {first_line}: {first_message})")]
    Ingest {
        failed: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl UumError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UumError::Io { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            UumError::Config(_) => ErrorCategory::Config,
            UumError::Shape(_)
            | UumError::NonFinite { .. }
            | UumError::AllMasked { .. }
            | UumError::NonFiniteLoss { .. }
            | UumError::Numeric(_) => ErrorCategory::Numeric,
            UumError::Record { .. }
            | UumError::Ingest { .. }
            | UumError::Data(_)
            | UumError::CheckpointVersion { .. }
            | UumError::CheckpointShape { .. }
            | UumError::Checkpoint(_)
            | UumError::Io { .. } => ErrorCategory::Data,
        }
    }
}
