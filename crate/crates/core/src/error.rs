//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid trimap plane: value {value} at ({row}, {col}) is not one of 0, 128, 255")]
    InvalidTrimapValue { value: u8, row: usize, col: usize },

    #[error("trimap has no unknown region")]
    NoUnknownRegion,

    #[error("metric region is empty")]
    EmptyRegion,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image decode error for {path}: {source}")]
    ImageDecode {
        path: String,
        source: image::ImageError,
    },

    #[error("i/o error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration} (batch id {batch_id})")]
    NonFiniteLoss { iteration: usize, batch_id: String },

    #[error("gradient check failed: worst tensor {tensor} with relative error {rel_err:.3e}")]
    GradCheckFailed { tensor: String, rel_err: f64 },

    #[error("unknown component: {0}")]
    UnknownComponent(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
