use thiserror::Error;

/// Errors raised by the estimation, sampling and I/O layers.
#[derive(Debug, Error)]
pub enum AmvError {
    #[error("invalid grid {rows}x{cols}: dimensions must be positive powers of two")]
    InvalidGrid { rows: usize, cols: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("observation mask has no observed pixel at time {0}")]
    EmptyMask(&'static str),

    #[error("expected error must be positive and finite (observable {index}: {value})")]
    InvalidExpectedError { index: usize, value: f64 },

    #[error("empty evaluation domain")]
    EmptyDomain,

    #[error("hessian assembly is not symmetric (max deviation {0:e})")]
    AsymmetricHessian(f64),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("config parse error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmvError>;
