use thiserror::Error;

/// Errors surfaced by the imputation library.
#[derive(Error, Debug)]
pub enum AdastiError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("normalization error for node '{node}': {message}")]
    Normalization { node: String, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdastiError>;

impl AdastiError {
    pub fn contract(msg: impl Into<String>) -> Self {
        AdastiError::Contract(msg.into())
    }
}
