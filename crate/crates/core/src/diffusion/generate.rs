use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Provenance, SyntheticDataset};
use super::process::{ancestral_update, draw_noise, guided_prediction, NoisePredictor};
use super::schedule::{NoiseSchedule, SamplingPlan};
use super::DiffusionError;
use crate::autodiff::Array;
use crate::data::{params_digest, quantize};
use crate::nets::Denoiser;
use crate::scalar::Scalar;
use crate::seed::mix_seed;

/// Images sampled together in one batched chain. Chunk membership depends
/// only on image order, never on the worker count.
pub const GEN_CHUNK: usize = 32;
/// Sampling attempts per image before generation aborts.
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Guidance scale `s ≥ 1`; 1 disables guidance.
    pub guidance_scale: f64,
    pub sampling_steps: usize,
    pub per_class_count: usize,
    pub seed: u64,
    /// Labels to generate; `None` means every class of the denoiser.
    pub classes: Option<Vec<usize>>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { guidance_scale: 2.0, sampling_steps: 100, per_class_count: 100, seed: 0, classes: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleJob {
    pub class: usize,
    pub index: usize,
}

/// Seed of one image's private stream.
pub fn image_seed(master: u64, class: usize, index: usize, attempt: usize) -> u64 {
    mix_seed(&[master, class as u64, index as u64, attempt as u64])
}

/// Runs complete chains for a batch; `None` marks images that went non-finite.
fn run_chain<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    plan: &SamplingPlan,
    s: f64,
    geometry: (usize, usize, usize),
    classes: &[usize],
    seeds: &[u64],
) -> Result<Vec<Option<Vec<f32>>>, DiffusionError> {
    let (c, h, w) = geometry;
    let per_image = c * h * w;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let start = draw_noise(&mut rngs, per_image);
    let mut x = Array::new(vec![classes.len(), c, h, w], start.into_iter().map(T::of).collect())?;
    for position in (0..plan.steps.len()).rev() {
        let step = &plan.steps[position];
        let eps_hat = guided_prediction(model, &x, step.t, classes, s)?;
        let z = (position > 0).then(|| draw_noise(&mut rngs, per_image));
        x = ancestral_update(&x, &eps_hat, step, z.as_deref());
    }
    Ok(x.data()
        .chunks(per_image)
        .map(|img| {
            img.iter().all(|v| v.is_finite()).then(|| img.iter().map(|v| v.f64().clamp(-1.0, 1.0) as f32).collect())
        })
        .collect())
}

fn sample_chunk<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    plan: &SamplingPlan,
    s: f64,
    geometry: (usize, usize, usize),
    jobs: &[SampleJob],
    master_seed: u64,
) -> Result<Vec<Vec<f32>>, DiffusionError> {
    let classes: Vec<usize> = jobs.iter().map(|j| j.class).collect();
    let seeds: Vec<u64> = jobs.iter().map(|j| image_seed(master_seed, j.class, j.index, 0)).collect();
    let first = run_chain(model, plan, s, geometry, &classes, &seeds)?;
    jobs.iter()
        .zip(first)
        .map(|(job, img)| {
            if let Some(img) = img {
                return Ok(img);
            }
            for attempt in 1..MAX_ATTEMPTS {
                let seed = image_seed(master_seed, job.class, job.index, attempt);
                if let Some(img) = run_chain(model, plan, s, geometry, &[job.class], &[seed])?.pop().flatten() {
                    return Ok(img);
                }
            }
            Err(DiffusionError::SamplingFailed { class: job.class, index: job.index, attempts: MAX_ATTEMPTS })
        })
        .collect()
}

/// Samples one image per job with guidance scale `s`, spreading fixed-size
/// chunks over `workers` threads. Output is independent of `workers`.
pub fn sample_images<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    plan: &SamplingPlan,
    s: f64,
    geometry: (usize, usize, usize),
    jobs: &[SampleJob],
    master_seed: u64,
    workers: usize,
) -> Result<Vec<Vec<f32>>, DiffusionError> {
    if !(s >= 1.0 && s.is_finite()) {
        return Err(DiffusionError::InvalidGuidance(s));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DiffusionError::InvalidConfig(format!("worker pool: {e}")))?;
    let chunks: Vec<Result<Vec<Vec<f32>>, DiffusionError>> = pool.install(|| {
        jobs.par_chunks(GEN_CHUNK).map(|chunk| sample_chunk(model, plan, s, geometry, chunk, master_seed)).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

impl GenConfig {
    pub fn validate(&self, num_classes: usize, t_train: usize) -> Result<Vec<usize>, DiffusionError> {
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(DiffusionError::InvalidGuidance(self.guidance_scale));
        }
        if self.sampling_steps == 0 || self.sampling_steps > t_train {
            return Err(DiffusionError::InvalidConfig(format!(
                "sampling steps must be in [1, {t_train}], got {}",
                self.sampling_steps
            )));
        }
        if self.per_class_count == 0 {
            return Err(DiffusionError::InvalidConfig("per-class count must be positive".into()));
        }
        let classes = self.classes.clone().unwrap_or_else(|| (0..num_classes).collect());
        if classes.is_empty() {
            return Err(DiffusionError::InvalidConfig("no classes requested".into()));
        }
        let mut seen = vec![false; num_classes];
        for &c in &classes {
            if c >= num_classes || std::mem::replace(&mut seen[c], true) {
                return Err(DiffusionError::InvalidConfig(format!(
                    "class {c} is out of range or repeated (denoiser has {num_classes} classes)"
                )));
            }
        }
        Ok(classes)
    }
}

/// Generates `per_class_count` images for every requested class, class-major.
pub fn generate_dataset<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    config: &GenConfig,
    workers: usize,
) -> Result<SyntheticDataset, DiffusionError> {
    let mc = model.config();
    if mc.max_timestep != schedule.t_train() {
        return Err(DiffusionError::InvalidConfig(format!(
            "denoiser trained for {} timesteps, schedule has {}",
            mc.max_timestep,
            schedule.t_train()
        )));
    }
    let classes = config.validate(mc.num_classes, schedule.t_train())?;
    let plan = schedule.respace(config.sampling_steps)?;
    let jobs: Vec<SampleJob> = classes
        .iter()
        .flat_map(|&class| (0..config.per_class_count).map(move |index| SampleJob { class, index }))
        .collect();
    let size = crate::data::IMAGE_SIZE;
    let geometry = (mc.image_channels, size, size);
    let images = sample_images(model, &plan, config.guidance_scale, geometry, &jobs, config.seed, workers)?;
    let pixels: Vec<u8> = images.iter().flatten().map(|&v| quantize(v)).collect();
    let labels = jobs.iter().map(|j| j.class).collect();
    let provenance = Provenance {
        guidance_scale: config.guidance_scale,
        sampling_steps: config.sampling_steps,
        training_steps: schedule.t_train(),
        seed: config.seed,
        per_class_count: config.per_class_count,
        classes,
        denoiser_digest: params_digest(model.params()),
        schedule_digest: schedule.digest(),
    };
    SyntheticDataset::new(geometry, mc.num_classes, pixels, labels, provenance)
}
