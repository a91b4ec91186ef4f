//! Training loop, prediction and evaluation.

pub mod metrics;
mod predict;
mod sgd;
mod train;

pub use metrics::{evaluate, mse_u8, EvalItem, Metrics};
pub use predict::{clips_to_batch, predict, predict_batch, Batch};
pub use sgd::{lr_schedule, sgd_update, SgdConfig, TrainState};
pub use train::{
    read_epoch_log, train, train_step, train_with_state, write_epoch_log, ClipSource, EpochRecord,
    StoreClips, TrainOutcome,
};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::tensor_nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64, loss: f64 },
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("{0} clip set is empty")]
    EmptyClips(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
