use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{0} values do not fill shape {1:?}")]
    LengthMismatch(usize, Vec<usize>),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("tape node {node} references later node {input}")]
    CycleDetected { node: usize, input: usize },
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("item {item} is not in the catalog of {catalog} items")]
    UnknownItem { item: usize, catalog: usize },
    #[error("item features have width {got}, expected {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("replay buffer holds {len} transitions, {requested} requested")]
    Underfilled { len: usize, requested: usize },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
