use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: novel class {class_id} has {available} instances, {required} required")]
    Sampling {
        class_id: usize,
        available: usize,
        required: usize,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("degenerate box {0}: covers no pixels")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },

    #[error("loss composition error: {0}")]
    Composition(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
