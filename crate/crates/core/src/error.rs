use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::StepReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its allowed domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inputs are individually valid but inconsistent with each other
    /// (shape mismatch, wrong scenario variant, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("training diverged at step {}: non-finite objective", .0.step)]
    Divergence(Box<StepReport>),

    #[error("numerical fault: {0}")]
    Fault(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Contract(_))
    }
}
