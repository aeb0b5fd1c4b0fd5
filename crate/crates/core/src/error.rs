use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector {index} has norm {norm:e}, at or below the 1e-12 floor")]
    ZeroNorm { index: usize, norm: f64 },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch for parameter {index}: expected {expected} values, got {actual}")]
    ShapeMismatch { index: usize, expected: usize, actual: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("at least 2 images are required per batch, got {0}")]
    TooFewImages(usize),

    #[error("anchor {anchor} has no negatives left in its comparison pool")]
    EmptyPool { anchor: usize },

    #[error("anchor {anchor} has no positive of its class")]
    DegenerateClass { anchor: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("fold {fold} contains a single class of pairs")]
    DegenerateFold { fold: usize },

    #[error("FAR target {far:e} needs at least {required} negative pairs, have {available}")]
    InsufficientNegatives {
        far: f64,
        required: usize,
        available: usize,
    },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for {key}: {message}")]
    Validation { key: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable code used in `error[CODE]:` diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroNorm { .. } => "zero-norm",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidProbability(_) => "invalid-probability",
            Error::TooFewImages(_) => "too-few-images",
            Error::EmptyPool { .. } => "empty-pool",
            Error::DegenerateClass { .. } => "degenerate-class",
            Error::DegenerateBatch(_) => "degenerate-batch",
            Error::NumericalDomain(_) => "numerical-domain",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::DegenerateFold { .. } => "degenerate-fold",
            Error::InsufficientNegatives { .. } => "insufficient-negatives",
            Error::EmptyGallery => "empty-gallery",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::Io(_) => "io",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }

    /// Process exit status: 2 for I/O and unreadable files, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Corrupt(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }
}
