use thiserror::Error;

use crate::graph_ir::Precision;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch at {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph does not match the {variant} variant: {reason}")]
    VariantMismatch { variant: String, reason: String },

    #[error("uncalibrated precision {0}: resource fixtures exist only for <8,3> and <16,6>")]
    Uncalibrated(Precision),

    #[error("no calibrated residual units found in the lowered design")]
    NoCalibratedUnits,

    #[error("invalid training plan: {0}")]
    InvalidPlan(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
