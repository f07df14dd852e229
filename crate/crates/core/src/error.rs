use std::path::PathBuf;

/// Errors produced anywhere in the audit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum FaithError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-finite activation at flat index {index}")]
    NonFinite { index: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("unknown granularity {0:?}")]
    UnknownGranularity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("coordinate ({token}, {layer}) out of bounds for trace with {n_tokens} tokens and {n_layers} layers")]
    OutOfBounds {
        token: usize,
        layer: usize,
        n_tokens: usize,
        n_layers: usize,
    },

    #[error("granularity mismatch: circuit is {circuit}, trace is {trace}")]
    GranularityMismatch { circuit: String, trace: String },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),

    #[error("schema violation at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("unknown concept {0:?}")]
    UnknownConcept(String),

    #[error("judge failure: {0}")]
    Judge(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing data: {0}")]
    Missing(String),
}

impl FaithError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaithError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FaithError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FaithError>;
