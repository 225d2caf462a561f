use drift_core::DriftError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed DTNS data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Tensor(#[from] drift_tensor::TensorError),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Tags an error with the pipeline stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<HarnessError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| HarnessError::Stage { stage, source: Box::new(e.into()) })
    }
}
