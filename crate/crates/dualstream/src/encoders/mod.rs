//! The two stream backbones.

pub mod layers;
pub mod mobilenet;
pub mod vit;

use thiserror::Error;

pub use mobilenet::{make_divisible, InvertedResidual, MobileNetV2, MobileNetV2Config, StageSpec};
pub use vit::{ViT, ViTConfig};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
