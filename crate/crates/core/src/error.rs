use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("model does not have dynamic layer normalization enabled")]
    DlnDisabled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
