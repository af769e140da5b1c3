use std::path::PathBuf;

use rankage_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or arguments, detected before any work starts.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("age {age} outside configured range [{min}, {max}]")]
    AgeOutOfRange { age: f64, min: f64, max: f64 },

    #[error("phantom geometry does not fit: {0}")]
    Geometry(String),

    #[error("{path}: bad magic {found:?}, expected \"RVOL\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported volume version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: dimensions {dims:?} overflow the addressable voxel count")]
    DimensionOverflow { path: PathBuf, dims: [u32; 3] },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{what} is empty")]
    Empty { what: String },

    #[error("zero variance in {what}")]
    ZeroVariance { what: &'static str },

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("model has not been trained; saliency of an untrained model needs an explicit override")]
    Untrained,

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::AgeOutOfRange { .. }
                | Error::Geometry(_)
                | Error::UnknownLayer(_)
                | Error::Empty { .. }
                | Error::Untrained
        )
    }
}
