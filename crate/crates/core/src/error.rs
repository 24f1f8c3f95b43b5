use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {op}")]
    NonFinite { op: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed pose in {file}: {reason}")]
    MalformedPose { file: String, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("image decode failed for {}: {reason}", path.display())]
    ImageDecode { path: PathBuf, reason: String },

    #[error("unsupported image format: {}", .0.display())]
    UnsupportedFormat(PathBuf),

    #[error("checkpoint version mismatch: found {found:?}")]
    VersionMismatch { found: String },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint shape error: {0}")]
    CheckpointShape(String),

    #[error("training aborted at iteration {iteration} (view {view}, patch {patch}): {reason}")]
    TrainAbort {
        iteration: usize,
        view: usize,
        patch: String,
        reason: String,
    },

    #[error("unmatched files: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}
