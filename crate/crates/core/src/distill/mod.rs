//! Distillation losses and the teacher and student training loops.

mod loss;
mod train;

pub use loss::{hard_label_loss, hard_label_loss_value, kd_loss, kd_loss_value, ProbDist};
pub use train::{train_student, train_teacher, write_trace, DistillConfig, EpochRecord, SgdConfig, TrainReport};

use crate::autodiff::AutodiffError;
use crate::metrics::MetricsError;
use crate::nets::NetError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistillError {
    #[error("logit length mismatch: teacher {teacher:?}, student {student:?}")]
    LengthMismatch { teacher: Vec<usize>, student: Vec<usize> },
    #[error("non-finite {which} logits")]
    NonFiniteLogits { which: &'static str },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("probabilities must be nonnegative and sum to 1 (sum {sum})")]
    NotADistribution { sum: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("teacher predicts {teacher} classes, student {student}")]
    ClassMismatch { teacher: usize, student: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[cfg(test)]
mod tests;
