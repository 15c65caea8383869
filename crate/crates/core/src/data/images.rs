use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::Array;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        })
    }
}

/// Labelled images stored as `[-1, 1]` floats, one `channels×height×width`
/// record per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let image_len = channels * height * width;
        if image_len == 0 || num_classes == 0 {
            return Err(DataError::Invalid("empty image geometry or class count".into()));
        }
        if pixels.len() != labels.len() * image_len {
            return Err(DataError::CountMismatch { images: pixels.len() / image_len, labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        if let Some(index) = pixels.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::PixelRange { value: pixels[index], index });
        }
        Ok(ImageSet { channels, height, width, num_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet { pixels, labels: indices.iter().map(|&i| self.labels[i]).collect(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> ImageSet {
        ImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Stacks the chosen images into `[n, c, h, w]`, mirroring left-right where
    /// `flips[k]` is set.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flips: Option<&[bool]>) -> Array<T> {
        let (c, h, w) = self.geometry();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for (k, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            if flips.is_some_and(|f| f[k]) {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev().map(|&v| T::of(v as f64)));
                }
            } else {
                data.extend(img.iter().map(|&v| T::of(v as f64)));
            }
        }
        Array::new(vec![indices.len(), c, h, w], data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Number of images carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// A real (non-generated) split.
#[derive(Clone, Debug, PartialEq)]
pub struct RealDataset {
    pub split: Split,
    pub images: ImageSet,
}
