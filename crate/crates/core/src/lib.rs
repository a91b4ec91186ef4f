//! Traffic map forecasting: movie storage, clip sampling, reference
//! baselines, static masks, and a hand-written U-Net with SGD training.

pub mod baselines;
pub mod dataset;
pub mod masks;
pub mod movie_store;
pub mod tensor_nn;
pub mod trainer;
