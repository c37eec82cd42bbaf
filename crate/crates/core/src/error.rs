use std::io;

use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("non-finite value in layer '{layer}' at element {index}")]
    NonFinite { layer: String, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("duplicate layer name '{0}'")]
    DuplicateLayer(String),

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("layer '{layer}': index {value} at position {position} out of range (limit {limit})")]
    IndexOutOfRange {
        layer: String,
        position: usize,
        value: u64,
        limit: u64,
    },

    #[error("layer '{0}': nonzero padding bits")]
    NonzeroPadding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
