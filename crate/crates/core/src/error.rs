use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unidentifiable noise rates for condition {condition}: {reason}")]
    Unidentifiable { condition: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("zero-probability evidence: {0}")]
    ImpossibleEvidence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Numeric(_) | Error::Unidentifiable { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index >= size {
        return Err(Error::IndexOutOfRange { what, index, size });
    }
    Ok(())
}
