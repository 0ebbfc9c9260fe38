use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CtError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("action has {got} components, task expects {expected}")]
    ActionDim { expected: usize, got: usize },

    #[error("episode already terminated; call reset() first")]
    EpisodeDone,

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("subset selection produced no episodes")]
    EmptySubset,

    #[error("no episode with at least {window} steps")]
    NoEligibleEpisode { window: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    Schema(String),

    #[error("config key `{path}`: {message}")]
    Type { path: String, message: String },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CtError {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtError::Storage {
            path: path.into(),
            source,
        }
    }
}
