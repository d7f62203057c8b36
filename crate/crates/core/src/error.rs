use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("layer {index}: {reason}")]
    LayerShape { index: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("truncated {0}")]
    Truncated(String),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("region index {index} out of range 1..={max}")]
    RegionOutOfRange { index: usize, max: usize },
    #[error("grid order {n} exceeds map size {height}x{width}")]
    GridTooFine { n: usize, height: usize, width: usize },
    #[error("model at chance-zero on all transforms")]
    ZeroAttention,
    #[error("unknown augmentation method `{0}`")]
    UnknownMethod(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::UnknownMethod(_) | Error::Config(_) => {
                ErrorClass::Usage
            }
            Error::NonFinite { .. } | Error::ZeroAttention => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
