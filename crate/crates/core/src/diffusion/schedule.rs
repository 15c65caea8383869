use super::DiffusionError;
use crate::data::sha256_hex;

/// Per-timestep coefficients of a linear-β diffusion, indexed by `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub const DEFAULT_T_TRAIN: usize = 400;
/// The 1000-step linear range (1e-4, 0.02) rescaled by 1000/400.
pub const DEFAULT_BETA_MIN: f64 = 2.5e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.05;

/// Linear β from `beta_min` to `beta_max` over `t_train` steps, with
/// `ā_t = Π(1 − β_i)` and `σ_t = √β_t`.
pub fn make_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_train < 2 {
        return Err(DiffusionError::InvalidSchedule(format!("need at least 2 timesteps, got {t_train}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let span = (t_train - 1) as f64;
    let beta: Vec<f64> = (0..t_train).map(|i| beta_min + (beta_max - beta_min) * i as f64 / span).collect();
    let alpha_bar = beta
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { beta_min, beta_max, beta, alpha_bar, sigma })
}

/// Coefficients of one reverse step in a (possibly respaced) chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanStep {
    /// Training timestep fed to the denoiser.
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

/// Reverse-chain coefficients, ordered by increasing timestep. Sampling
/// walks the steps from last to first; step 0 is the final, noise-free one.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub steps: Vec<PlanStep>,
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.t_train() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.t_train() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.sigma[self.check_t(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Digest over the step count and every β.
    pub fn digest(&self) -> String {
        let mut bytes = (self.t_train() as u64).to_le_bytes().to_vec();
        for b in &self.beta {
            bytes.extend(b.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Evenly spaced subsequence of `steps` timesteps from 1 to `T`.
    pub fn respaced_timesteps(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        let t_train = self.t_train();
        if steps == 0 || steps > t_train {
            return Err(DiffusionError::InvalidConfig(format!(
                "sampling steps must be in [1, {t_train}], got {steps}"
            )));
        }
        if steps == 1 {
            return Ok(vec![t_train]);
        }
        let span = (t_train - 1) as f64 / (steps - 1) as f64;
        Ok((0..steps).map(|i| 1 + (i as f64 * span).round() as usize).collect())
    }

    /// Reverse-chain coefficients over the respaced timesteps. β of each
    /// retained step is recomputed from consecutive retained ā values; where
    /// the retained steps are adjacent the original β is used unchanged.
    pub fn respace(&self, steps: usize) -> Result<SamplingPlan, DiffusionError> {
        let ts = self.respaced_timesteps(steps)?;
        let mut plan = Vec::with_capacity(ts.len());
        let mut prev: Option<usize> = None;
        for &t in &ts {
            let alpha_bar = self.alpha_bar[t - 1];
            let adjacent = match prev {
                Some(p) => p + 1 == t,
                None => t == 1,
            };
            let beta = if adjacent {
                self.beta[t - 1]
            } else {
                let prev_bar = prev.map_or(1.0, |p| self.alpha_bar[p - 1]);
                1.0 - alpha_bar / prev_bar
            };
            plan.push(PlanStep { t, beta, alpha: 1.0 - beta, alpha_bar, sigma: beta.sqrt() });
            prev = Some(t);
        }
        Ok(SamplingPlan { steps: plan })
    }
}
