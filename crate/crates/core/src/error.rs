use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("capacity exceeded: {size} elements > cap {cap}")]
    Capacity { size: usize, cap: usize },

    #[error("zero divisor at layer {layer}: weights must be reinitialized")]
    DivisorZero { layer: usize },

    #[error("bound undefined: spectral norm of layer {layer} is zero")]
    UndefinedBound { layer: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("divergence guard tripped at iter {iter}: |D(x)| = {value:e}")]
    Divergence { iter: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
