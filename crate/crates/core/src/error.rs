use domus_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed input file; `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    /// Input data violates a precondition (unsorted stream, empty set, ...).
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn data_err(msg: impl Into<String>) -> CoreError {
    CoreError::Data(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}
