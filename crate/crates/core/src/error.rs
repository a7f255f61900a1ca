use thiserror::Error;

use crate::numerics::NumericsError;

/// Failures shared by the model components.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no selected positions carry an MLM label")]
    NoLabels,
    #[error("batch has no content positions")]
    NoContent,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
