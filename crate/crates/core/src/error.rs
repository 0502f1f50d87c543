use std::fmt;

/// Errors raised by the task-model engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("reference object `{0}` is not part of the world layout")]
    MissingObject(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed {what} at line {line}, column {column}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidInput(msg.to_string())
    }

    pub(crate) fn parse(what: &'static str, err: serde_json::Error) -> Self {
        Error::Parse {
            what,
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
