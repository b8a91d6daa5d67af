use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("{0}: backward called without a pending forward context")]
    ContextConsumed(&'static str),

    #[error("batch norm needs more than one element per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("shift exponent {0} outside [-15, 0]")]
    Encoding(i32),

    #[error("{value} is outside the Q16.16 range")]
    FixedRange { value: f64 },

    #[error("epoch {epoch} outside schedule range 0..={total}")]
    Epoch { epoch: usize, total: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("k = {k} exceeds point count {n}")]
    Neighbors { k: usize, n: usize },

    #[error("cannot take {m} points from a cloud of {n}")]
    Subsample { m: usize, n: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; first non-finite output in layer {layer}")]
    NonFinite { epoch: usize, batch: usize, layer: String },

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
