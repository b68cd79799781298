use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate test: {0}")]
    DegenerateTest(String),
    #[error("Cox fit diverged at iteration {iteration}; last finite beta {last_beta:?}")]
    Diverged { iteration: usize, last_beta: Vec<f64> },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("censoring survival estimate is zero at t = {time}")]
    DegenerateWeights { time: f64 },
    #[error("schema error: missing or invalid column `{0}`")]
    Schema(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument(msg.into())
}
