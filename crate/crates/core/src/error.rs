use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum CdcError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("element count overflows for shape {0:?}")]
    Overflow(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coordinate {coord} out of bounds for axis {axis} with extent {extent}")]
    OutOfBounds {
        axis: usize,
        coord: usize,
        extent: usize,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad tensor file: {0}")]
    BadFormat(String),
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing data: {0}")]
    Missing(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CdcError>;

impl CdcError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CdcError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
