use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum PqmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PqmError {
    /// Process exit code: 1 for validation failures, 2 for I/O or corrupt data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PqmError::Dimension(_) | PqmError::InvalidArgument(_) | PqmError::Config(_) => 1,
            PqmError::Corrupt(_)
            | PqmError::MissingArtifacts(_)
            | PqmError::Io(_)
            | PqmError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PqmError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::PqmError::Dimension(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::PqmError::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! corrupt {
    ($($arg:tt)*) => {
        $crate::error::PqmError::Corrupt(format!($($arg)*))
    };
}

pub(crate) use {corrupt, dim_err, invalid};
