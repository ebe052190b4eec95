use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MgtrError>;

#[derive(Debug, Error)]
pub enum MgtrError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid pair ({0}, {1}): {2}")]
    InvalidPair(usize, usize, String),

    #[error("non-finite value in query {query}: {what}")]
    NonFiniteQuery { query: usize, what: String },

    #[error("image {image_id}: {m} ground-truth instances exceed {n} queries")]
    TooManyInstances {
        image_id: String,
        m: usize,
        n: usize,
    },

    #[error("cost matrix: {0}")]
    InvalidCostMatrix(String),

    #[error("assignment does not belong to this prediction/ground-truth pair: {0}")]
    AssignmentMismatch(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("annotation errors:\n{}", .0.join("\n"))]
    Annotation(Vec<String>),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl MgtrError {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            MgtrError::InvalidBox(_) => "invalid_box",
            MgtrError::InvalidInstance(_) => "invalid_instance",
            MgtrError::InvalidPair(..) => "invalid_pair",
            MgtrError::NonFiniteQuery { .. } => "non_finite_query",
            MgtrError::TooManyInstances { .. } => "too_many_instances",
            MgtrError::InvalidCostMatrix(_) => "invalid_cost_matrix",
            MgtrError::AssignmentMismatch(_) => "assignment_mismatch",
            MgtrError::NonFiniteGradient(_) => "non_finite_gradient",
            MgtrError::NonFiniteLoss { .. } => "non_finite_loss",
            MgtrError::Config(_) => "config",
            MgtrError::ImageTooSmall(_) => "image_too_small",
            MgtrError::Annotation(_) => "annotation",
            MgtrError::Checkpoint { .. } => "checkpoint",
            MgtrError::Shape(_) => "shape",
            MgtrError::Tensor(_) => "tensor",
            MgtrError::Io(_) => "io",
            MgtrError::Json(_) => "json",
            MgtrError::Image(_) => "image",
        }
    }
}
