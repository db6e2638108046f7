//! Error type for scene generation, rendering, and the dataset cache.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] f2mf_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;
