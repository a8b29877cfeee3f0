use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("degenerate class: {0}")]
    DegenerateClass(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {layer}")]
    Numeric { layer: String },
    #[error("non-finite training loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("sweep cell {coordinate} failed: {source}")]
    Cell {
        coordinate: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
