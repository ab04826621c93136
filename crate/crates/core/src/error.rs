use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate landmarks: {0}")]
    Degenerate(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
