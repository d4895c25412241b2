use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer was driven out of order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("loss diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"LSNF\"")]
    Magic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u16, supported: u16 },

    #[error("truncated checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
