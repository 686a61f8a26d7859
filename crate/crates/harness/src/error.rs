use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] addp::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema `{schema}` rejected document: {reason}")]
    Schema { schema: String, reason: String },

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("run directory {0} is locked by another pipeline")]
    Locked(PathBuf),

    #[error("stage `{stage}` failed (last metrics: {last_metrics}): {source}")]
    Stage {
        stage: String,
        last_metrics: String,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
