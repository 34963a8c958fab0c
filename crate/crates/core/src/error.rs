use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("config parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in `{name}` during {phase}")]
    NonFinite { name: String, phase: &'static str },

    #[error("missing artifact {path:?}: run `{phase}` first")]
    Dependency { phase: &'static str, path: PathBuf },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } => 3,
            Error::Dependency { .. } => 4,
            Error::NonFinite { .. } => 5,
            _ => 1,
        }
    }

    /// Short machine-parseable tag used on the single error line printed by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::State(_) => "state",
            Error::DegenerateState(_) => "degenerate-state",
            Error::Precondition(_) => "precondition",
            Error::NonFinite { .. } => "numeric",
            Error::Dependency { .. } => "dependency",
            Error::Truncated(_) => "truncated",
            Error::BadMagic { .. } => "bad-magic",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
