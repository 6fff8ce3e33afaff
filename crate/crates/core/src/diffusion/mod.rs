//! Conditional denoising diffusion model: noise schedule, U-Net noise
//! predictor, pretraining, fine-tuning with frozen parameter groups, and
//! ancestral sampling.
//!
//! Binary cells enter the model as grids in `{-1, +1}` and leave it
//! thresholded at zero.

mod checkpoint;
pub mod nn;
mod sampler;
mod schedule;
mod train;
mod unet;
mod uq;

pub use checkpoint::{Checkpoint, CheckpointMeta, ParamTensor};
pub use sampler::{
    denoise_predict, fields_to_cells, sample, sample_fields, sample_with, BoundDenoiser,
    NoisePredictor, SAMPLE_CHUNK,
};
pub use schedule::{forward_sample, make_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use train::{
    batch_loss, finetune, pretrain, Batch, FreezeSpec, LayerKind, LossKind, TrainConfig,
    TrainOutcome,
};
pub use unet::{stack_grids, Conditioning, Denoiser, DenoiserConfig};
pub use uq::{
    component_stats, mc_property_uq, propagate, summarize, ComponentStats, PropertyVector,
    UqResult, DEFAULT_KAPPA,
};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at iteration {iteration} (lr {lr:e})")]
    NonFiniteLoss { iteration: u64, lr: f64 },
    #[error("block index {index} outside a {levels}-level network")]
    UnknownBlockIndex { index: usize, levels: usize },
    #[error("training dataset has no (nominal, fabricated) pairs")]
    EmptyDataset,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
