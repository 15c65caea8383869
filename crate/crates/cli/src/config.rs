//! JSON run configuration. Every field has a default; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use synthkd::data::{sha256_hex, ToySpec};
use synthkd::diffusion::{
    make_schedule, DenoiserTrainConfig, GenConfig, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_T_TRAIN,
};
use synthkd::distill::{DistillConfig, SgdConfig};
use synthkd::nets::{ClassifierConfig, DenoiserConfig, Tier};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { t_train: DEFAULT_T_TRAIN, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub train: DenoiserTrainConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection { base_channels: 12, embed_dim: 32, train: DenoiserTrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub tier: Tier,
    pub optim: SgdConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection { tier: Tier::M, optim: SgdConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub tier: Tier,
    /// Seed of the student's initial weights.
    pub init_seed: u64,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection { tier: Tier::S, init_seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    /// Images per class of each generated set.
    pub per_class: usize,
    pub guidance_scales: Vec<f64>,
    pub sampling_steps: Vec<usize>,
    pub taus: Vec<f64>,
    pub teacher_tiers: Vec<Tier>,
    pub student_tiers: Vec<Tier>,
    /// Per-class sizes for the diversity and scale sweeps.
    pub sizes: Vec<usize>,
    /// Diversity sweep: images-per-class × epochs held at this product.
    pub iteration_budget: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            seeds: vec![0, 1, 2],
            per_class: 100,
            guidance_scales: vec![1.0, 2.0, 4.0],
            sampling_steps: vec![50, 100, 250],
            taus: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            teacher_tiers: Tier::ALL.to_vec(),
            student_tiers: vec![Tier::S, Tier::M],
            sizes: vec![25, 50, 100, 200],
            iteration_budget: 3200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub toy: ToySpec,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub gen: GenConfig,
    pub distill: DistillConfig,
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Reads `path`, or returns defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// sha256 of the fully-defaulted configuration serialised with sorted
    /// keys, so key order and omitted defaults do not change it.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        make_schedule(s.t_train, s.beta_min, s.beta_max).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            num_classes: self.toy.num_classes,
            image_channels: 1,
            base_channels: self.denoiser.base_channels,
            embed_dim: self.denoiser.embed_dim,
            max_timestep: self.schedule.t_train,
        }
    }

    pub fn classifier_config(&self, tier: Tier) -> ClassifierConfig {
        ClassifierConfig { tier, num_classes: self.toy.num_classes, image_channels: 1 }
    }
}
