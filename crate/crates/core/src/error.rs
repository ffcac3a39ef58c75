use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("invalid architecture spec: field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("batch norm `{0}` has no running statistics for eval mode")]
    UninitializedRunningStats(String),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("gradient for `{name}` contains NaN; step refused")]
    NanGradient { name: String },
    #[error("model for instrument `{instrument}` has fingerprint {found}, expected {expected}")]
    FingerprintMismatch {
        instrument: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Wav(#[from] crate::signal::wav::WavError),
    #[error(transparent)]
    Checkpoint(#[from] crate::train::checkpoint::CheckpointError),
    #[error("training diverged at step {step}")]
    Diverged {
        step: u64,
        last_good: Box<crate::train::checkpoint::Checkpoint>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
