use std::io;

use thiserror::Error;

use crate::mining::PixelIndex;

pub type Result<T> = std::result::Result<T, UcdError>;

#[derive(Debug, Error)]
pub enum UcdError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("zero-norm feature at {0}")]
    ZeroNormFeature(PixelIndex),

    #[error("probabilities not normalized at pixel {pixel}: sum = {sum}")]
    NotNormalized { pixel: usize, sum: f64 },

    #[error("class {class} out of range (total {total})")]
    ClassOutOfRange { class: usize, total: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UcdError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        UcdError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UcdError::Invalid(msg.into())
    }
}
