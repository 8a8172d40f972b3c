use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A non-finite value appeared; `op` names the producing operation.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// Masked prediction needs at least one masked frame.
    #[error("frame mask selects no frames")]
    EmptyMask,

    #[error("utterance too short: {0}")]
    EmptyUtterance(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::EmptyMask
            | Error::EmptyUtterance(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Parse { .. }
            | Error::CorruptCheckpoint(_)
            | Error::UnsupportedVersion { .. }
            | Error::Io(_)
            | Error::Json(_) => 4,
        }
    }
}
