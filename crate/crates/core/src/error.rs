use std::io;

use grf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("empty manifest {0}")]
    EmptyManifest(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable, machine-parsable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Shape(_)) | Error::Shape(_) => "shape",
            Error::Tensor(TensorError::ChannelMismatch { .. }) => "channel_mismatch",
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::LabelOutOfRange(_) => "label_range",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::EmptyManifest(_) => "empty_manifest",
            Error::Malformed { .. } => "malformed",
            Error::Unsupported(_) => "unsupported",
            Error::CheckFailed(_) => "check_failed",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
