use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: dtype mismatch ({left:?} vs {right:?})")]
    DTypeMismatch {
        op: &'static str,
        left: crate::tensor::DType,
        right: crate::tensor::DType,
    },

    #[error("degenerate attention row {row}: no allowed entries")]
    DegenerateAttentionRow { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wav decode: {0}")]
    Wav(String),

    #[error("format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("task {0} is already registered")]
    DuplicateTask(usize),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("task {0} has no training samples")]
    EmptyDataset(usize),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
