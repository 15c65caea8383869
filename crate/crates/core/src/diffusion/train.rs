use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::process::forward_noise;
use super::schedule::NoiseSchedule;
use super::DiffusionError;
use crate::autodiff::{Array, Tape, Var};
use crate::data::ImageSet;
use crate::nets::{Condition, Denoiser, Params};
use crate::optim::Adam;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Probability of replacing the class with the null condition.
    pub cond_dropout: f64,
    /// Decay of the weight average returned after training; 0 returns the raw weights.
    pub ema_decay: f64,
    /// Random horizontal mirroring of training images.
    pub flip: bool,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 2e-3,
            cond_dropout: 0.1,
            ema_decay: 0.999,
            flip: true,
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad(format!("condition dropout must be in [0, 1), got {}", self.cond_dropout));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("EMA decay must be in [0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl LossTrace {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `window` steps.
    pub fn final_mean(&self, window: usize) -> Option<f64> {
        let n = window.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    pub fn epoch_means(&self) -> Vec<f64> {
        if self.steps_per_epoch == 0 {
            return Vec::new();
        }
        self.losses.chunks(self.steps_per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }

    /// Running minimum of the epoch means: a monotone non-increasing summary.
    pub fn smoothed(&self) -> Vec<f64> {
        self.epoch_means()
            .into_iter()
            .scan(f64::INFINITY, |best, m| {
                *best = best.min(m);
                Some(*best)
            })
            .collect()
    }
}

/// Replaces each label by the null condition with probability `p`.
pub fn drop_conditions<R: Rng>(labels: &[usize], p: f64, rng: &mut R) -> Vec<Condition> {
    labels
        .iter()
        .map(|&c| if p > 0.0 && rng.random::<f64>() < p { Condition::Null } else { Condition::Class(c) })
        .collect()
}

/// Records the noise-prediction MSE for one batch: `x_t` is built from `x0`
/// and `eps` in closed form and the model is asked to recover `eps`.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_loss<T: Scalar>(
    model: &Denoiser<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    schedule: &NoiseSchedule,
    x0: &Array<T>,
    timesteps: &[usize],
    eps: &Array<T>,
    conds: &[Condition],
) -> Result<Var, DiffusionError> {
    let n = x0.shape().first().copied().unwrap_or(0);
    if timesteps.len() != n || x0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch { lhs: x0.shape().to_vec(), rhs: eps.shape().to_vec() });
    }
    let per_image = x0.len() / n.max(1);
    let mut xt = Vec::with_capacity(x0.len());
    for (k, &t) in timesteps.iter().enumerate() {
        let range = k * per_image..(k + 1) * per_image;
        let one = |a: &Array<T>| Array::new(vec![per_image], a.data()[range.clone()].to_vec());
        xt.extend_from_slice(forward_noise(&one(x0)?, t, &one(eps)?, schedule)?.data());
    }
    let xt = tape.constant(Array::new(x0.shape().to_vec(), xt)?);
    let target = tape.constant(eps.clone());
    let pred = model.forward(tape, vars, xt, timesteps, conds)?;
    Ok(tape.mse(pred, target)?)
}

fn ema_update<T: Scalar>(avg: &mut Params<T>, params: &Params<T>, decay: f64) {
    let (d, keep) = (T::of(decay), T::of(1.0 - decay));
    for (a, p) in avg.values_mut().iter_mut().zip(params.values()) {
        for (av, &pv) in a.data_mut().iter_mut().zip(p.data()) {
            *av = d * *av + keep * pv;
        }
    }
}

/// Trains `model` on `data` with Adam. Returns the weight average (or the raw
/// weights when `ema_decay` is 0) and the per-step loss trace.
pub fn train_denoiser<T: Scalar>(
    mut model: Denoiser<T>,
    data: &ImageSet,
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
) -> Result<(Denoiser<T>, LossTrace), DiffusionError> {
    config.validate()?;
    let mc = model.config().clone();
    if mc.max_timestep != schedule.t_train() {
        return Err(DiffusionError::InvalidConfig(format!(
            "denoiser expects {} timesteps, schedule has {}",
            mc.max_timestep,
            schedule.t_train()
        )));
    }
    if data.num_classes() != mc.num_classes || data.geometry().0 != mc.image_channels {
        return Err(DiffusionError::InvalidConfig(format!(
            "dataset has {} classes and {} channels, denoiser expects {} and {}",
            data.num_classes(),
            data.geometry().0,
            mc.num_classes,
            mc.image_channels
        )));
    }
    if data.is_empty() {
        return Err(DiffusionError::InvalidConfig("empty training set".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut average = model.params().clone();
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let mut trace = LossTrace { losses: Vec::with_capacity(config.epochs * steps_per_epoch), steps_per_epoch };
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = trace.losses.len();
            let flips: Vec<bool> = batch.iter().map(|_| config.flip && rng.random::<bool>()).collect();
            let x0 = data.batch::<T>(batch, Some(&flips));
            let timesteps: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=schedule.t_train())).collect();
            let eps_data = (0..x0.len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
            let eps = Array::new(x0.shape().to_vec(), eps_data)?;
            let conds = drop_conditions(&data.batch_labels(batch), config.cond_dropout, &mut rng);

            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape, true);
            let loss = denoiser_loss(&model, &mut tape, &vars, schedule, &x0, &timesteps, &eps, &conds)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { step });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Array<T>> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
            adam.step(model.params_mut(), &grads, config.lr);
            // Warm-up keeps the average from being dominated by the initial weights.
            let decay = config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema_update(&mut average, model.params(), decay);
            trace.losses.push(value);
        }
    }

    if config.ema_decay > 0.0 && !trace.losses.is_empty() {
        model = Denoiser::from_params(mc, average)?;
    }
    Ok((model, trace))
}
