use thiserror::Error;

/// Errors raised by the simulation library and CLI.
#[derive(Debug, Error)]
pub enum ApcError {
    /// An argument lies outside the domain the operation accepts.
    #[error("input-domain error: {0}")]
    Domain(String),

    /// A dataset or report failed validation after parsing.
    #[error("data validation error: {0}")]
    Validation(String),

    /// Malformed CSV input; `row` is the 1-based data row (header excluded).
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl ApcError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        ApcError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ApcError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ApcError>;
