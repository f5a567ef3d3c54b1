use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("read error: {0}")]
    Read(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    RatioSum([f64; 3]),

    #[error("dataset too small: {0} records, need at least 3")]
    TooSmall(usize),

    #[error("missing annotation for {} queries: {}", .0.len(), .0.join(", "))]
    MissingAnnotation(Vec<String>),

    #[error("unparseable response: {0:?}")]
    UnparseableResponse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing annotation for persona `{0}`")]
    MissingPersona(String),

    #[error("expected {expected} weights, got {got}")]
    WeightLength { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no embedding for query `{0}`")]
    MissingEmbedding(String),

    #[error("loss became NaN at epoch {epoch}, batch {batch} (last finite loss {last_finite})")]
    NanLoss { epoch: usize, batch: usize, last_finite: f64 },

    #[error("registry hash mismatch: expected {expected}, found {found}")]
    RegistryMismatch { expected: String, found: String },

    #[error("query ids differ: only in gold {only_gold:?}, only in prediction {only_pred:?}")]
    IdMismatch {
        only_gold: Vec<String>,
        only_pred: Vec<String>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
