use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected} channels, found {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid convolution: {0}")]
    InvalidConv(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Training hit a non-finite loss or update; carries the last good state.
    #[error("training diverged at iteration {iter}: {msg}")]
    Diverged {
        iter: usize,
        msg: String,
        last_good: Box<crate::model::ModelState<f32>>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
