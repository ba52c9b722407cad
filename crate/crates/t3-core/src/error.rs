//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum T3Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, T3Error>;
