use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("codebook: {0}")]
    Codebook(String),

    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),

    #[error("batch: {0}")]
    Batch(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation: {0}")]
    Validation(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable error class, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "dimension",
            Error::Vocab { .. } => "vocabulary",
            Error::EmptySequence(_) => "empty-sequence",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Codebook(_) => "codebook",
            Error::UnknownLanguage(_) => "registry",
            Error::Batch(_) => "batch",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
