use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KdsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KdsmError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity exceeded: {got} prompts but only {capacity} slots")]
    Capacity { got: usize, capacity: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KdsmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KdsmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            KdsmError::Config(_) | KdsmError::Usage(_) | KdsmError::Capacity { .. } => 2,
            KdsmError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
