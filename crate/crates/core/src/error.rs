use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedAlError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedAlError>;

pub(crate) fn config_err(msg: impl Into<String>) -> FedAlError {
    FedAlError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> FedAlError {
    FedAlError::Shape(msg.into())
}

pub(crate) fn domain_err(msg: impl Into<String>) -> FedAlError {
    FedAlError::Domain(msg.into())
}
