use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{hard_label_loss, kd_loss};
use super::DistillError;
use crate::autodiff::{Array, Tape, Var};
use crate::data::ImageSet;
use crate::metrics::{accuracy_from_logits, argmax, predict_logits, LogitTable};
use crate::nets::Classifier;
use crate::optim::{Sgd, StepDecay};
use crate::scalar::Scalar;

/// SGD loop settings shared by teacher and student training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub flip: bool,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: 12,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.625, 0.75, 0.875],
            gamma: 0.1,
            flip: true,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay nonnegative".into());
        }
        if self.milestones.iter().any(|f| !(0.0..=1.0).contains(f)) || self.gamma.is_nan() || self.gamma <= 0.0 {
            return bad("milestones must be fractions in [0, 1] and gamma positive".into());
        }
        Ok(())
    }

    fn schedule(&self) -> StepDecay {
        StepDecay::from_fractions(self.lr, self.epochs, &self.milestones, self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub soft_weight: f64,
    pub hard_weight: f64,
    pub optim: SgdConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let optim = SgdConfig { epochs: 20, lr: 0.02, ..SgdConfig::default() };
        DistillConfig { tau: 10.0, soft_weight: 1.0, hard_weight: 0.0, optim }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DistillError::BadTemperature(self.tau));
        }
        if !(self.soft_weight >= 0.0 && self.hard_weight >= 0.0) || self.soft_weight + self.hard_weight == 0.0 {
            return Err(DistillError::InvalidConfig(format!(
                "loss weights must be nonnegative and not both zero (soft {}, hard {})",
                self.soft_weight, self.hard_weight
            )));
        }
        self.optim.validate()
    }
}

/// One row of a training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Real-test accuracy after the last epoch.
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub trace: Vec<EpochRecord>,
}

/// Writes a trace as CSV with a header row.
pub fn write_trace<W: Write>(out: W, trace: &[EpochRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean cross-entropy and accuracy of `model` on `images`.
fn evaluate<T: Scalar>(model: &Classifier<T>, images: &ImageSet) -> Result<(f64, f64), DistillError> {
    let logits = predict_logits(model, images, false)?;
    let ce: f64 = logits
        .rows()
        .zip(images.labels())
        .map(|(row, &l)| super::hard_label_loss_value(row, l))
        .sum::<Result<f64, _>>()?;
    Ok((ce / images.len() as f64, accuracy_from_logits(&logits, images.labels())?))
}

/// Batch context handed to a loss builder.
struct Batch<'a> {
    indices: &'a [usize],
    flips: &'a [bool],
}

fn sgd_loop<T: Scalar>(
    mut model: Classifier<T>,
    train: &ImageSet,
    test: &ImageSet,
    config: &SgdConfig,
    digest: &str,
    train_split: &str,
    mut loss_of: impl FnMut(&mut Tape<T>, Var, &Batch) -> Result<Var, DistillError>,
) -> Result<(Classifier<T>, TrainReport), DistillError> {
    config.validate()?;
    if train.num_classes() != model.num_classes() || test.num_classes() != model.num_classes() {
        return Err(DistillError::ClassMismatch { teacher: train.num_classes(), student: model.num_classes() });
    }
    if train.is_empty() && config.epochs > 0 {
        return Err(DistillError::InvalidConfig("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let schedule = config.schedule();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(2 * config.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut last = None;
    let record = |epoch, split: &str, loss, accuracy| EpochRecord {
        epoch,
        split: split.to_string(),
        loss,
        accuracy,
        seed: config.seed,
        config_digest: digest.to_string(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr_at(epoch);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, indices) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> = indices.iter().map(|_| config.flip && rng.random::<bool>()).collect();
            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape, true);
            let x = tape.constant(train.batch::<T>(indices, Some(&flips)));
            let logits = model.forward(&mut tape, &vars, x)?;
            let loss = loss_of(&mut tape, logits, &Batch { indices, flips: &flips })?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(DistillError::NonFiniteLoss { epoch, step });
            }
            let k = model.num_classes();
            let out = tape.value(logits).to_f64_vec();
            hits += out.chunks(k).zip(indices).filter(|(row, &i)| argmax(row) == train.labels()[i]).count();
            loss_sum += value * indices.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Array<T>> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
            opt.step(model.params_mut(), &grads, lr);
        }
        let n = train.len() as f64;
        trace.push(record(epoch + 1, train_split, loss_sum / n, hits as f64 / n));
        let (test_loss, test_acc) = evaluate(&model, test)?;
        trace.push(record(epoch + 1, "test", test_loss, test_acc));
        best = best.max(test_acc);
        last = Some(test_acc);
    }

    let final_accuracy = match last {
        Some(a) => a,
        None => {
            let (test_loss, test_acc) = evaluate(&model, test)?;
            trace.push(record(0, "test", test_loss, test_acc));
            best = test_acc;
            test_acc
        }
    };
    Ok((model, TrainReport { final_accuracy, best_accuracy: best, trace }))
}

/// Supervised cross-entropy training on real data.
pub fn train_teacher<T: Scalar>(
    model: Classifier<T>,
    train: &ImageSet,
    test: &ImageSet,
    config: &SgdConfig,
    digest: &str,
) -> Result<(Classifier<T>, TrainReport), DistillError> {
    sgd_loop(model, train, test, config, digest, "train", |tape, logits, batch| {
        hard_label_loss(tape, logits, &train.batch_labels(batch.indices))
    })
}

fn gather<T: Scalar>(tables: &[LogitTable; 2], batch: &Batch) -> Array<T> {
    let k = tables[0].num_classes;
    let data = batch
        .indices
        .iter()
        .zip(batch.flips)
        .flat_map(|(&i, &f)| tables[f as usize].row(i).iter().map(|&v| T::of(v)))
        .collect();
    Array::new(vec![batch.indices.len(), k], data).expect("teacher batch shape")
}

/// Trains `student` on generated images against the frozen `teacher`, with
/// loss `soft · kd + hard · CE(generating label)`. Real-test accuracy is
/// recorded after every epoch.
pub fn train_student<T: Scalar>(
    student: Classifier<T>,
    teacher: &Classifier<T>,
    synthetic: &ImageSet,
    real_test: &ImageSet,
    config: &DistillConfig,
    digest: &str,
) -> Result<(Classifier<T>, TrainReport), DistillError> {
    config.validate()?;
    if teacher.num_classes() != student.num_classes() {
        return Err(DistillError::ClassMismatch { teacher: teacher.num_classes(), student: student.num_classes() });
    }
    // Teacher logits for both orientations, computed once.
    let tables = if config.soft_weight > 0.0 {
        Some([predict_logits(teacher, synthetic, false)?, predict_logits(teacher, synthetic, true)?])
    } else {
        None
    };
    let (soft, hard, tau) = (config.soft_weight, config.hard_weight, config.tau);
    sgd_loop(student, synthetic, real_test, &config.optim, digest, "synthetic", |tape, logits, batch| {
        let soft_term = match &tables {
            Some(t) => Some(kd_loss(tape, &gather(t, batch), logits, tau)?),
            None => None,
        };
        let hard_term = if hard > 0.0 {
            Some(hard_label_loss(tape, logits, &synthetic.batch_labels(batch.indices))?)
        } else {
            None
        };
        let scaled = |tape: &mut Tape<T>, v: Option<Var>, w: f64| -> Result<Option<Var>, DistillError> {
            match v {
                Some(v) if w != 1.0 => Ok(Some(tape.scale(v, T::of(w))?)),
                other => Ok(other),
            }
        };
        let soft_term = scaled(tape, soft_term, soft)?;
        let hard_term = scaled(tape, hard_term, hard)?;
        Ok(match (soft_term, hard_term) {
            (Some(s), Some(h)) => tape.add(s, h)?,
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => unreachable!("validated: weights not both zero"),
        })
    })
}
