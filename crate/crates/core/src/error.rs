use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("placement out of bounds: patch {patch_h}x{patch_w} at ({row},{col}) on {canvas_h}x{canvas_w} canvas")]
    Placement {
        patch_h: usize,
        patch_w: usize,
        row: usize,
        col: usize,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient benign pool: need {needed}, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("wrong key is identical to the true key")]
    InvalidWrongKey,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("split error: label {label} has {available} samples, needs {needed}")]
    Split {
        label: usize,
        available: usize,
        needed: usize,
    },

    #[error("invalid label id {label} for label count {label_count}")]
    Label { label: usize, label_count: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("empty evaluation set: {0}")]
    EmptyEval(String),

    #[error("report comparison error: {0}")]
    Comparison(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Pipeline {
            stage,
            source: Box::new(source),
        }
    }

    /// CLI exit code: 1 for configuration problems, 2 for pipeline failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidParameter(_) => 1,
            Error::Pipeline { source, .. } => source.exit_code().max(2),
            _ => 2,
        }
    }
}
