use cpn_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidParams(msg.into())
}
