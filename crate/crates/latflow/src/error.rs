//! Crate-wide error type.
//!
//! Errors are grouped into classes so the CLI can map them onto stable
//! exit codes (config = 2, data/format = 3, numeric divergence = 4).

use thiserror::Error;

/// Coarse error class used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// File did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    /// File ended before a structurally required section was complete.
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    /// Header-declared shape disagrees with the payload byte count.
    #[error("header/payload shape disagreement: header declares {expected} payload bytes, found {found}")]
    ShapeDisagreement { expected: u64, found: u64 },

    #[error("header parse error: {0}")]
    HeaderParse(String),

    /// Checkpoint or manifest version is not supported.
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Checkpoint manifest does not tile its blob exactly.
    #[error("manifest inconsistent: {0}")]
    ManifestInconsistent(String),

    /// Invalid data passed to an operation (misaligned times, empty box, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values encountered during training or sampling.
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl Error {
    /// Map this error onto its CLI exit-code class.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Divergence(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
