//! Orchestrator-side errors.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mow_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("checkpoint version mismatch: found `{found}`, expected `{expected}`")]
    CkptVersion { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CkptCorrupt(String),

    #[error("{0}")]
    Invalid(String),
}
