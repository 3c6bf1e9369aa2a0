use std::io;

use thiserror::Error;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("load error in {location}: {message}")]
    Load { location: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("stale activation cache: computed at parameter version {cached}, network is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn load(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Load { .. } => "load",
            Error::Dimension(_) => "dimension",
            Error::Numerical(_) => "numerical",
            Error::StaleCache { .. } => "stale_cache",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
