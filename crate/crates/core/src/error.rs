use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid feature sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid annotation for video {video_id}: {reason}")]
    InvalidAnnotation { video_id: String, reason: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("empty label")]
    EmptyLabel,

    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSyntheticSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("non-finite loss in batch {batch} (bce={bce}, nce={nce}, cts={cts})")]
    NonFiniteLoss {
        batch: usize,
        bce: f64,
        nce: f64,
        cts: f64,
    },

    #[error("unknown inference path {0:?}")]
    UnknownPath(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
