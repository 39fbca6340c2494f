use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {op} with shapes {lhs} and {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("label {label} outside the active output set (size {dim})")]
    LabelOutOfRange { label: usize, dim: usize },

    #[error("label {label} is masked out of the active label set")]
    MaskedLabel { label: usize },

    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("truncated IDX payload in {path}: expected {expected} bytes, got {got}")]
    IdxTruncated {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss at task {task}, step {step}")]
    NonFiniteLoss { task: usize, step: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
