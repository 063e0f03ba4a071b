//! Toy reconstruction network: a multimodal slice-stack transformer
//! encoder, a gated multi-scale feature pyramid and a progressive
//! upsampling convolutional decoder producing voxel occupancy.
//!
//! Everything is generic over the scalar; training runs in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod input;
pub mod loss;
pub mod network;
pub mod params;
pub mod reconstruct;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{ModelError, Result};
pub use input::{output_grid, ModelInput};
pub use loss::{gradient_check, loss, loss_and_grad, GradCheck, LossValue};
pub use network::{decode, feature_pyramid, forward, forward_logits, mhsa_block, patch_embed};
pub use params::ModelParams;
pub use reconstruct::{reconstruct, threshold, Reconstruction};
pub use tensor::Tensor;
pub use train::{train, EpochRecord, Sample, Schedule, TrainConfig, TrainOutcome};

pub type Params64 = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
