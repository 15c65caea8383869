use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{NoiseSchedule, SamplingPlan};
use super::DiffusionError;
use crate::autodiff::Array;
use crate::nets::{Condition, Denoiser, NetError};
use crate::scalar::Scalar;

/// Anything that predicts the noise in a batch of noisy images.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn predict_noise(&self, x: &Array<T>, timesteps: &[usize], conds: &[Condition]) -> Result<Array<T>, NetError>;
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict_noise(&self, x: &Array<T>, timesteps: &[usize], conds: &[Condition]) -> Result<Array<T>, NetError> {
        self.predict(x, timesteps, conds)
    }
}

/// Closed-form marginal `x_t = √ā_t · x0 + √(1 − ā_t) · ε`.
pub fn forward_noise<T: Scalar>(
    x0: &Array<T>,
    t: usize,
    eps: &Array<T>,
    schedule: &NoiseSchedule,
) -> Result<Array<T>, DiffusionError> {
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch { lhs: x0.shape().to_vec(), rhs: eps.shape().to_vec() });
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| T::of(a * x.f64() + b * e.f64())).collect();
    Ok(Array::new(x0.shape().to_vec(), data)?)
}

/// Classifier-free guidance: `ε̂ = ε_uncond + s · (ε_cond − ε_uncond)`.
///
/// At `s = 1` the conditional prediction is returned unchanged.
pub fn guided_noise<T: Scalar>(eps_cond: &Array<T>, eps_uncond: &Array<T>, s: f64) -> Result<Array<T>, DiffusionError> {
    if !(s >= 1.0 && s.is_finite()) {
        return Err(DiffusionError::InvalidGuidance(s));
    }
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(DiffusionError::ShapeMismatch { lhs: eps_cond.shape().to_vec(), rhs: eps_uncond.shape().to_vec() });
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let scale = T::of(s);
    let data = eps_cond.data().iter().zip(eps_uncond.data()).map(|(&c, &u)| u + scale * (c - u)).collect();
    Ok(Array::new(eps_cond.shape().to_vec(), data)?)
}

/// Conditional and null predictions for a batch, evaluated as one stacked
/// forward pass. The null pass is skipped at `s = 1`.
pub(crate) fn guided_prediction<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    x: &Array<T>,
    t: usize,
    classes: &[usize],
    s: f64,
) -> Result<Array<T>, DiffusionError> {
    let n = classes.len();
    let cond: Vec<Condition> = classes.iter().map(|&c| Condition::Class(c)).collect();
    if s == 1.0 {
        let eps = model.predict_noise(x, &vec![t; n], &cond)?;
        return guided_noise(&eps, &eps, 1.0);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 2 * n;
    let stacked = Array::new(shape, [x.data(), x.data()].concat())?;
    let conds: Vec<Condition> = cond.into_iter().chain(std::iter::repeat_n(Condition::Null, n)).collect();
    let both = model.predict_noise(&stacked, &vec![t; 2 * n], &conds)?;
    let half = x.len();
    let eps_cond = Array::new(x.shape().to_vec(), both.data()[..half].to_vec())?;
    let eps_uncond = Array::new(x.shape().to_vec(), both.data()[half..].to_vec())?;
    guided_noise(&eps_cond, &eps_uncond, s)
}

/// Mean update of one reverse step plus `σ_t · z` (no noise when `z` is `None`).
pub(crate) fn ancestral_update<T: Scalar>(
    x: &Array<T>,
    eps_hat: &Array<T>,
    step: &super::PlanStep,
    z: Option<&[f64]>,
) -> Array<T> {
    let inv_sqrt_alpha = 1.0 / step.alpha.sqrt();
    let eps_coef = step.beta / (1.0 - step.alpha_bar).sqrt();
    let data = x
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(k, (&xv, &e))| {
            let mean = inv_sqrt_alpha * (xv.f64() - eps_coef * e.f64());
            T::of(mean + z.map_or(0.0, |z| step.sigma * z[k]))
        })
        .collect();
    Array::new(x.shape().to_vec(), data).expect("same shape")
}

/// Draws one standard-normal value per pixel from each image's own stream.
pub(crate) fn draw_noise(rngs: &mut [ChaCha8Rng], per_image: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(rngs.len() * per_image);
    for rng in rngs.iter_mut() {
        z.extend((0..per_image).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)));
    }
    z
}

/// One guided reverse step at chain `position` (an index into `plan.steps`).
///
/// `rngs` holds one stream per image; position 0 is the final step and
/// draws no noise.
pub fn denoise_step<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    x_t: &Array<T>,
    position: usize,
    plan: &SamplingPlan,
    classes: &[usize],
    s: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Array<T>, DiffusionError> {
    let step = plan
        .steps
        .get(position)
        .ok_or_else(|| DiffusionError::InvalidConfig(format!("chain position {position} beyond plan")))?;
    if rngs.len() != classes.len() || x_t.shape().first() != Some(&classes.len()) {
        return Err(DiffusionError::InvalidConfig("one class and one stream per image required".into()));
    }
    let eps_hat = guided_prediction(model, x_t, step.t, classes, s)?;
    let z = (position > 0).then(|| draw_noise(rngs, x_t.len() / classes.len()));
    let next = ancestral_update(x_t, &eps_hat, step, z.as_deref());
    if !next.all_finite() {
        return Err(DiffusionError::NonFinite { position, t: step.t });
    }
    Ok(next)
}
