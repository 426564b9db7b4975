use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed layout JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("region not aligned to {alignment}px grid: {detail}")]
    Unaligned { alignment: usize, detail: String },

    #[error("canvas {width}x{height} too small: {detail}")]
    CanvasTooSmall {
        width: usize,
        height: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("training diverged at step {step} (last good step {last_good:?})")]
    Diverged {
        step: usize,
        last_good: Option<usize>,
    },

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }

    /// True for failures caused by the file system or image codec.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Png(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
