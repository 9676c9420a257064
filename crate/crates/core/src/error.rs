//! Error type shared by every stage of the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XvaError>;

#[derive(Debug, Error)]
pub enum XvaError {
    /// Schema or parameter problem; `field` points at the offending config key.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A numerical precondition failed during a stage.
    #[error("numerical error in {stage} at {location}: {message}")]
    Numerical {
        stage: &'static str,
        location: String,
        message: String,
    },

    /// An operation was called with inputs that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl XvaError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        XvaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numerical(
        stage: &'static str,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        XvaError::Numerical {
            stage,
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            XvaError::Config { .. } => 2,
            XvaError::Numerical { .. } => 3,
            XvaError::Usage(_) => 2,
            XvaError::Io(_) | XvaError::Serde(_) => 1,
        }
    }
}

impl From<serde_json::Error> for XvaError {
    fn from(e: serde_json::Error) -> Self {
        XvaError::Serde(e.to_string())
    }
}

impl From<csv::Error> for XvaError {
    fn from(e: csv::Error) -> Self {
        XvaError::Serde(e.to_string())
    }
}
