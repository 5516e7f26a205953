use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("constant input: min == max == {0}")]
    ConstantInput(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lesion placement failed after {0} attempts")]
    LesionPlacement(usize),

    #[error("index {index} out of range for vocabulary of {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unpaired volume ids: {0}")]
    Unpaired(String),

    #[error("missing inputs: {0}")]
    MissingInputs(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
