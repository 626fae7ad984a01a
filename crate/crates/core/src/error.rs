use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported image format")]
    UnsupportedFormat,

    #[error("truncated image data: {0}")]
    Truncated(String),

    #[error("image must have 3 channels (RGB), found {0}")]
    ChannelCount(usize),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("training set contains anomalous sample {0}")]
    NotOneClass(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model is untrained")]
    Untrained,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
