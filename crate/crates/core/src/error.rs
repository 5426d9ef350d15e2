//! Error type shared by the core modules.

use alloc::string::String;

/// Errors produced by model, privacy, codec, and protocol operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),

    #[error("unknown layer index {0}")]
    UnknownLayer(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),

    #[error("epsilon must be a finite positive number")]
    InvalidEpsilon,

    #[error("keep probability must lie in (0.5, 1]")]
    InvalidKeepProb,

    #[error("length mismatch: expected {expected}, got {got} ({context})")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("unknown message type {0}")]
    UnknownMessageType(u8),

    #[error("unknown codec id {0}")]
    UnknownCodec(u8),

    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("payload length {0} exceeds the protocol limit")]
    LengthOverflow(u64),

    #[error("trailing bytes after payload")]
    TrailingBytes,

    #[error("malformed payload: {0}")]
    MalformedPayload(&'static str),

    #[error("codec mismatch: expected {expected}, got {got}")]
    CodecMismatch { expected: u8, got: u8 },

    #[error("unknown sample id {0}")]
    UnknownSampleId(u64),

    #[error("duplicate sample id {0}")]
    DuplicateSampleId(u64),

    #[error("session not established")]
    NoSession,

    #[error("session rejected: {0}")]
    SessionRejected(String),

    #[error("batch id mismatch: expected {expected}, got {got}")]
    BatchIdMismatch { expected: u64, got: u64 },

    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("both classes must be present")]
    SingleClass,

    #[error("dataset generation failed: {0}")]
    Generation(&'static str),

    #[error("malformed label file at line {line}: {reason}")]
    MalformedLabels { line: usize, reason: &'static str },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn len(context: &'static str, expected: usize, got: usize) -> Self {
        Error::LengthMismatch {
            context,
            expected,
            got,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
