use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input row. `line` is 1-based and counts the header.
    #[error("{message}, line {line}")]
    Parse { line: u64, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("no overlap in block {0}")]
    NoOverlap(String),

    /// An estimator or oracle does not apply to the supplied design.
    #[error("{0}")]
    Inapplicable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn inapplicable(msg: impl Into<String>) -> Self {
        Error::Inapplicable(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
