use thiserror::Error;

/// Errors produced anywhere in the extraction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    /// A file did not match its declared format.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// The oracle refused a batch because it would exceed the query cap.
    #[error("query budget exhausted: {used} of {cap} queries used")]
    BudgetExhausted { used: u64, cap: u64 },

    /// The requested operation is not available on this handle.
    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
