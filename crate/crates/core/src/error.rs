use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
///
/// The variants are grouped so that a command-line front end can map them to
/// exit codes: configuration problems, data problems, and runtime/numeric
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error at {path}:{line}: {message}")]
    DataLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("vocabulary error: token id {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },
    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("freeze violation: frozen tensor `{0}` changed during training")]
    FreezeViolation(String),
    #[error("rehearsal violation: {0}")]
    Rehearsal(String),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::DataLine { .. }
            | Error::Vocabulary { .. }
            | Error::Overlength { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
