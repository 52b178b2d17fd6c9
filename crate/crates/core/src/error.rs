use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights for layer {layer}: {reason}")]
    Weights { layer: String, reason: String },

    #[error("archive integrity error: {0}")]
    Integrity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no foreground found in image")]
    NoForeground,

    #[error("only {found} of {requested} patches satisfied the leaf-coverage rule")]
    PatchShortfall { found: usize, requested: usize },

    #[error("stage model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
