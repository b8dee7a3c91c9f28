use std::fmt;

/// Library-wide error type. Variants are grouped by how a caller should
/// react: `ShapeMismatch`/`InvalidArgument` are caller bugs or bad inputs,
/// `NonFinite` signals a numerical failure, and `Format`/`Io` cover file
/// handling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file existed but its contents did not match the expected layout.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::ShapeMismatch { op, detail: detail.to_string() }
    }

    pub fn invalid(detail: impl fmt::Display) -> Self {
        Error::InvalidArgument(detail.to_string())
    }

    pub fn non_finite(detail: impl fmt::Display) -> Self {
        Error::NonFinite(detail.to_string())
    }

    pub fn format(path: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Format { path: path.to_string(), detail: detail.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
