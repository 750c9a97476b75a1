use std::path::PathBuf;

use crate::grad::NonFinite;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),

    #[error("response is not a registered candidate of prompt {0}")]
    UnregisteredCandidate(usize),

    #[error("unsupported in this policy mode: {0}")]
    Mode(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical abort in {context}: {source}")]
    Numerical {
        context: String,
        #[source]
        source: NonFinite,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: &'static str, message: String },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(what: &'static str, message: impl ToString) -> Self {
        Self::Parse { what, message: message.to_string() }
    }

    pub fn numerical(context: impl Into<String>, source: NonFinite) -> Self {
        Self::Numerical { context: context.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
