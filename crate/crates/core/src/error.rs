use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no data")]
    NoData,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),
    #[error("insufficient data: need at least {needed} tokens, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("threshold {0} out of range (0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("unknown label id {0}")]
    UnknownLabel(u32),
    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("degenerate transport: Jacobian is numerically singular")]
    DegenerateTransport,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version unsupported: {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated file")]
    TruncatedFile,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for errors caused by the filesystem or by unreadable files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::ChecksumMismatch { .. }
                | Error::TruncatedFile
                | Error::Malformed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
