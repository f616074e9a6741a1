//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problem with input data (missing image, empty identity, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed model file.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Model file has an unsupported version.
    #[error("unsupported model file version {found} (supported: <= {supported})")]
    Version { found: u16, supported: u16 },

    /// Model file role tag does not match what the caller expected.
    #[error("role mismatch: expected {expected}, file contains {found}")]
    Role { expected: String, found: String },

    /// Stored checksum does not match the file contents.
    #[error("corruption detected: CRC32 mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Corruption { stored: u32, computed: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
