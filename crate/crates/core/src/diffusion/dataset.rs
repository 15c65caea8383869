use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::data::{dequantize, ImageSet};

/// Everything needed to regenerate a synthetic dataset byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub guidance_scale: f64,
    pub sampling_steps: usize,
    pub training_steps: usize,
    pub seed: u64,
    pub per_class_count: usize,
    pub classes: Vec<usize>,
    pub denoiser_digest: String,
    pub schedule_digest: String,
}

/// Generated images in 8-bit storage, labelled with their generating class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    geometry: (usize, usize, usize),
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    pub provenance: Provenance,
}

impl SyntheticDataset {
    pub fn new(
        geometry: (usize, usize, usize),
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self, DiffusionError> {
        let image_len = geometry.0 * geometry.1 * geometry.2;
        if image_len == 0 || pixels.len() != labels.len() * image_len {
            return Err(DiffusionError::InvalidConfig(format!(
                "{} pixel bytes for {} images of {geometry:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DiffusionError::InvalidConfig(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(SyntheticDataset { geometry, num_classes, pixels, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Dequantised view used for training and evaluation.
    pub fn images(&self) -> ImageSet {
        let pixels = self.pixels.iter().map(|&q| dequantize(q)).collect();
        ImageSet::new(self.geometry, self.num_classes, pixels, self.labels.clone()).expect("validated at construction")
    }

    /// Images `[0, per_class)` of every class, as generated with the same seed
    /// and a smaller per-class count.
    pub fn per_class_prefix(&self, per_class: usize) -> SyntheticDataset {
        let image_len = self.geometry.0 * self.geometry.1 * self.geometry.2;
        let keep: Vec<usize> = (0..self.len()).filter(|i| i % self.provenance.per_class_count < per_class).collect();
        let mut provenance = self.provenance.clone();
        provenance.per_class_count = per_class.min(provenance.per_class_count);
        SyntheticDataset {
            geometry: self.geometry,
            num_classes: self.num_classes,
            pixels: keep
                .iter()
                .flat_map(|&i| self.pixels[i * image_len..(i + 1) * image_len].iter().copied())
                .collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            provenance,
        }
    }
}
