use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("masked pooling over an empty mask")]
    EmptyPool,

    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("unexpected end of stream at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },

    #[error("record failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }

    /// True for errors caused by malformed user input (files, configs, records)
    /// rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::BadVersion(_)
                | Error::Truncated { .. }
                | Error::Validation(_)
                | Error::Checkpoint(_)
                | Error::Config(_)
                | Error::File { .. }
                | Error::Json(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
