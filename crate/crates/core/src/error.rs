use std::path::PathBuf;

use crate::cvae::Vae;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the binary artifact formats. Each variant is distinct so that
/// callers (and the fuzz tests) can tell corruption modes apart.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated file: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{trailing} unexpected trailing bytes")]
    TrailingBytes { trailing: u64 },
    #[error("inconsistent content: {0}")]
    Inconsistent(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged: {context}")]
    Diverged {
        context: String,
        /// Parameters at the end of the last epoch that finished cleanly.
        last_good: Option<Box<Vae>>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {path}: produce it with `{producer}` first")]
    MissingInput {
        path: PathBuf,
        producer: &'static str,
    },
    #[error("checksum mismatch for {path}: manifest says {expected}, file has {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse failure category; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Format,
    Numeric,
    MissingDependency,
    Usage,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Format(_) | Error::Checksum { .. } => ErrorCategory::Format,
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::MissingInput { .. } => ErrorCategory::MissingDependency,
            Error::Shape { .. } | Error::State(_) | Error::InvalidArgument(_) => {
                ErrorCategory::Usage
            }
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}
