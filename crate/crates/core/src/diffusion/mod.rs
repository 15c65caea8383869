//! Forward noising, denoiser training with condition dropout, guided
//! ancestral sampling and synthetic-dataset generation.

mod dataset;
mod generate;
mod process;
mod schedule;
mod train;

#[cfg(test)]
mod tests;

pub use dataset::{Provenance, SyntheticDataset};
pub use generate::{generate_dataset, image_seed, sample_images, GenConfig, SampleJob, GEN_CHUNK, MAX_ATTEMPTS};
pub use process::{denoise_step, forward_noise, guided_noise, NoisePredictor};
pub use schedule::{
    make_schedule, NoiseSchedule, PlanStep, SamplingPlan, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_T_TRAIN,
};
pub use train::{denoiser_loss, drop_conditions, train_denoiser, DenoiserTrainConfig, LossTrace};

use crate::autodiff::AutodiffError;
use crate::nets::NetError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("guidance scale must be a finite value >= 1, got {0}")]
    InvalidGuidance(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite sample at chain position {position} (timestep {t})")]
    NonFinite { position: usize, t: usize },
    #[error("sampling class {class} image {index} failed after {attempts} attempts")]
    SamplingFailed { class: usize, index: usize, attempts: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
