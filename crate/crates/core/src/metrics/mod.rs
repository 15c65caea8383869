//! Evaluation quantities: top-1 accuracy, teacher behaviour on generated
//! data and the smoothness of output distributions.

mod record;

pub use record::{write_records, MetricsContext, MetricsRecord};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::diffusion::SyntheticDataset;
use crate::nets::{Classifier, NetError};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot evaluate on an empty dataset")]
    Empty,
    #[error("model predicts {model} classes but the dataset has {dataset}")]
    ClassMismatch { model: usize, dataset: usize },
    #[error("{rows} logit rows for {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

const EVAL_CHUNK: usize = 256;

/// Row-major `n × k` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable {
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl LogitTable {
    pub fn new(num_classes: usize, data: Vec<f64>) -> Self {
        assert!(num_classes > 0 && data.len().is_multiple_of(num_classes), "ragged logit table");
        LogitTable { num_classes, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.num_classes)
    }
}

/// Logits of every image, optionally mirrored left-right. Chunks are
/// evaluated in parallel; results do not depend on the thread count.
pub fn predict_logits<T: Scalar>(
    model: &Classifier<T>,
    images: &ImageSet,
    flip: bool,
) -> Result<LogitTable, MetricsError> {
    let idx: Vec<usize> = (0..images.len()).collect();
    let chunks: Vec<Result<Vec<f64>, NetError>> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let flips = vec![flip; chunk.len()];
            let x = images.batch::<T>(chunk, Some(&flips));
            Ok(model.logits(&x)?.to_f64_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(images.len() * model.num_classes());
    for c in chunks {
        data.extend(c?);
    }
    Ok(LogitTable::new(model.num_classes(), data))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Population variance of the entries of one probability vector.
pub fn distribution_variance(probs: &[f64]) -> f64 {
    let k = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / k;
    probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / k
}

pub fn accuracy_from_logits(logits: &LogitTable, labels: &[usize]) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if logits.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { rows: logits.len(), labels: labels.len() });
    }
    let hits = logits.rows().zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over samples of the across-class variance of the softmax output.
pub fn dist_variance_from_logits(logits: &LogitTable) -> Result<f64, MetricsError> {
    if logits.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(logits.rows().map(|r| distribution_variance(&softmax(r))).sum::<f64>() / logits.len() as f64)
}

/// Mean of the largest softmax probability.
pub fn mean_confidence_from_logits(logits: &LogitTable) -> Result<f64, MetricsError> {
    if logits.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = logits.rows().map(|r| softmax(r).into_iter().fold(0.0, f64::max)).sum();
    Ok(total / logits.len() as f64)
}

fn check<T: Scalar>(model: &Classifier<T>, images: &ImageSet) -> Result<(), MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    if model.num_classes() != images.num_classes() {
        return Err(MetricsError::ClassMismatch { model: model.num_classes(), dataset: images.num_classes() });
    }
    Ok(())
}

/// Top-1 accuracy against the dataset labels.
pub fn accuracy<T: Scalar>(model: &Classifier<T>, images: &ImageSet) -> Result<f64, MetricsError> {
    check(model, images)?;
    accuracy_from_logits(&predict_logits(model, images, false)?, images.labels())
}

pub fn dist_variance<T: Scalar>(model: &Classifier<T>, images: &ImageSet) -> Result<f64, MetricsError> {
    check(model, images)?;
    dist_variance_from_logits(&predict_logits(model, images, false)?)
}

/// A teacher's view of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEval {
    /// Agreement with the generating labels.
    pub accuracy: f64,
    pub confidence: f64,
    pub dist_variance: f64,
}

impl TeacherEval {
    pub fn from_logits(logits: &LogitTable, labels: &[usize]) -> Result<Self, MetricsError> {
        Ok(TeacherEval {
            accuracy: accuracy_from_logits(logits, labels)?,
            confidence: mean_confidence_from_logits(logits)?,
            dist_variance: dist_variance_from_logits(logits)?,
        })
    }

    /// The three scalars as records sharing one context.
    pub fn records(&self, context: &MetricsContext) -> Vec<MetricsRecord> {
        [
            ("teacher_accuracy", self.accuracy),
            ("teacher_confidence", self.confidence),
            ("dist_variance", self.dist_variance),
        ]
        .into_iter()
        .map(|(name, value)| MetricsRecord { name: name.into(), value, context: context.clone() })
        .collect()
    }
}

pub fn teacher_eval_on_synthetic<T: Scalar>(
    teacher: &Classifier<T>,
    synthetic: &SyntheticDataset,
) -> Result<TeacherEval, MetricsError> {
    let images = synthetic.images();
    check(teacher, &images)?;
    TeacherEval::from_logits(&predict_logits(teacher, &images, false)?, images.labels())
}

#[cfg(test)]
mod tests;
