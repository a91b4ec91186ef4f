//! Dense tensors, hand-written forward/backward kernels and the U-Net built
//! from them. Everything is generic over [`Real`] so the same code runs in
//! f32 for training and f64 for gradient checks.

mod checkpoint;
mod gemm;
mod ops;
mod tensor;
mod unet;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use ops::{
    clamp_255, concat_channels, conv2d_backward, conv2d_forward, crop_spatial, maxpool2d_backward,
    maxpool2d_forward, mse_loss, pad_spatial, pad_to, relu_backward, relu_forward, split_channels,
    upconv2d_backward, upconv2d_forward, ConvGrads, CropRecord, PoolRecord,
};
pub use tensor::{Real, Tensor};
pub use unet::{
    unet_backward, unet_backward_cached, unet_forward, unet_forward_cached, unet_param_grads, ConvParams, DoubleConv,
    ForwardCache, UNetConfig, UNetParams,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("spatial size {h}x{w} is not divisible by {multiple}")]
    NotDivisible { h: usize, w: usize, multiple: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
