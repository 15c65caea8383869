//! Network families: the conditional denoiser and the tiered image classifier.

mod classifier;
mod condition;
mod denoiser;
mod params;

pub use classifier::{Classifier, ClassifierConfig, Tier};
pub use condition::Condition;
pub use denoiser::{timestep_features, Denoiser, DenoiserConfig, TIME_FEATURES};
pub use params::Params;

use crate::autodiff::AutodiffError;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("class {class} outside [0, {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("input shape {got:?}, expected {expected}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("batch of {images} images with {timesteps} timesteps and {conditions} conditions")]
    BatchMismatch { images: usize, timesteps: usize, conditions: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("unknown capacity tier {0:?} (expected S, M or L)")]
    UnknownTier(String),
}

fn check_layout<T: Scalar>(expected: &Params<T>, got: &Params<T>) -> Result<(), NetError> {
    if expected.len() != got.len() {
        return Err(NetError::Layout(format!("{} parameters, expected {}", got.len(), expected.len())));
    }
    for ((en, ev), (gn, gv)) in expected.iter().zip(got.iter()) {
        if en != gn || ev.shape() != gv.shape() {
            return Err(NetError::Layout(format!("{gn} {:?}, expected {en} {:?}", gv.shape(), ev.shape())));
        }
    }
    Ok(())
}
