use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} is (numerically) the zero vector")]
    ZeroVectorRow { row: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch of size {size} is too small (need at least {min})")]
    BatchTooSmall { size: usize, min: usize },

    #[error("LoRA rank {rank} must be in 1..{width}")]
    RankTooLarge { rank: usize, width: usize },

    #[error("bad image shape: {0}")]
    BadImageShape(String),

    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),

    #[error("no corruption kinds given")]
    EmptyKinds,

    #[error("point set is empty")]
    EmptySet,

    #[error("top-2 eigenvalues are both below {threshold:e}")]
    DegenerateSpectrum { threshold: f64 },

    #[error("mean prototype of class {class} cancels to zero")]
    ZeroMeanVector { class: usize },

    #[error("cannot build {classes} orthonormal prototypes in dimension {dim}")]
    TooManyClasses { classes: usize, dim: usize },

    #[error("stream yielded no batches")]
    EmptyStream,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
