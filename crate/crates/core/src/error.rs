use drift_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, DriftError>;

pub(crate) fn domain(msg: impl Into<String>) -> DriftError {
    DriftError::Domain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> DriftError {
    DriftError::Contract(msg.into())
}
