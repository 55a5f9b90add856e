use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FipoError {
    /// Malformed arguments to a pure function (length mismatch, bad token id).
    #[error("input error: {0}")]
    Input(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("degenerate group: reward std is zero (mean {mean})")]
    DegenerateGroup { mean: f64 },

    #[error("training stall: sampled {sampled} groups (resample cap {cap}) but only kept {kept} of {needed}")]
    TrainingStall {
        sampled: usize,
        kept: usize,
        needed: usize,
        cap: usize,
    },

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FipoError {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FipoError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FipoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FipoError>;
