use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("tensor {shape} needs {expected} elements, got {found}")]
    DataLength {
        shape: Shape,
        expected: usize,
        found: usize,
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: node {0} is not a scalar loss")]
    NotScalar(usize),

    #[error("decision map is not binary (value {value} at pixel {index})")]
    NotBinary { value: f32, index: usize },

    #[error("unknown fusion mode `{0}`")]
    UnknownMode(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error(transparent)]
    WeightFile(#[from] WeightFileError),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by numerics rather than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonFiniteGradient { .. }
        )
    }
}

/// Failures reading or validating a `.sfw` weight file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("expected entry `{expected}`, found `{found}`")]
    UnexpectedEntry { expected: String, found: String },
    #[error("expected {expected} entries, found {found}")]
    EntryCount { expected: usize, found: usize },
    #[error("shape chain violation at `{entry}`: {detail}")]
    ShapeChain { entry: String, detail: String },
    #[error("non-finite parameter in `{0}`")]
    NonFiniteParam(String),
    #[error("trailing bytes after checksum")]
    TrailingBytes,
}

impl WeightFileError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u8 {
        match self {
            WeightFileError::BadMagic => 1,
            WeightFileError::UnsupportedVersion(_) => 2,
            WeightFileError::Truncated => 3,
            WeightFileError::Checksum { .. } => 4,
            WeightFileError::UnsupportedDtype(_) => 5,
            WeightFileError::BadName => 6,
            WeightFileError::UnexpectedEntry { .. } => 7,
            WeightFileError::EntryCount { .. } => 8,
            WeightFileError::ShapeChain { .. } => 9,
            WeightFileError::NonFiniteParam(_) => 10,
            WeightFileError::TrailingBytes => 11,
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("truncated or corrupt image data: {0}")]
    Corrupt(String),
    #[error("image has a zero dimension")]
    ZeroDimension,
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
