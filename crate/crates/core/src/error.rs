use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PcrpError>;

#[derive(Debug, Error)]
pub enum PcrpError {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate anchor pose in sequence `{id}`: {reason}")]
    DegeneratePose { id: String, reason: String },
    #[error("cannot normalize a vector with norm {norm:e}")]
    Normalization { norm: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("unlabeled sequences: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PcrpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PcrpError::Io {
            path: path.into(),
            source,
        }
    }
}
