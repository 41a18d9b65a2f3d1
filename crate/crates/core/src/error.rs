use std::io;

use thiserror::Error;

/// Errors produced by every stage of the hashing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative feature entry {value} at row {row}, column {col}")]
    NegativeFeature { row: usize, col: usize, value: f32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unlabeled item at row {0}")]
    UnlabeledItem(usize),

    #[error("invalid label value {value} at row {row}, column {col}")]
    InvalidLabel { row: usize, col: usize, value: u8 },

    #[error("labels required: {0}")]
    MissingLabels(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("isolated node {0}: neighbor distances sum to zero")]
    IsolatedNode(usize),

    #[error("zero row {row} in {what}")]
    ZeroRow { what: &'static str, row: usize },

    #[error("code entry {value} at ({row}, {col}) is not +1 or -1")]
    NotBinary { row: usize, col: usize, value: f64 },

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
