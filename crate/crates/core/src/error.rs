use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the command-line tools for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: spatial dimensions must be even, got {height}x{width}")]
    OddDimension {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("{op}: kernel size must be odd, got {size}")]
    EvenKernel { op: &'static str, size: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: value out of range: {detail}")]
    OutOfRange { op: &'static str, detail: String },

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: row {row}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, row: usize, label: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Shape { .. }
            | Error::OddDimension { .. }
            | Error::EvenKernel { .. }
            | Error::OutOfRange { .. }
            | Error::UnknownNode(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::UnknownLabel { .. }
            | Error::CorruptCheckpoint(_)
            | Error::IncompatibleCheckpoint(_)
            | Error::EmptyClass(_) => ErrorKind::Data,
        }
    }
}
