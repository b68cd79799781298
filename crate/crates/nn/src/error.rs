use factsurv_autodiff::AutodiffError;
use factsurv_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown driver `{0}`")]
    UnknownDriver(String),
    #[error("numeric failure in {0}")]
    Numeric(String),
    #[error("training failed at epoch {epoch}, step {step}: {message}")]
    TrainingFailure { epoch: usize, step: usize, message: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> NnError {
    NnError::InvalidArgument(msg.into())
}
