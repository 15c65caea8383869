use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::images::{ImageSet, RealDataset, Split};
use super::{DataError, IMAGE_SIZE};
use crate::seed::mix_seed;

/// Procedural shape families; class `k` renders family `k`.
///
/// Every family is closed under left-right mirroring, so flip augmentation
/// never changes the class an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Ring,
    Plus,
    Saltire,
    HorizontalBars,
    VerticalBars,
    Checker,
    Box,
    Triangle,
    DotGrid,
    Diamond,
    Bullseye,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Disk,
        ShapeFamily::Ring,
        ShapeFamily::Plus,
        ShapeFamily::Saltire,
        ShapeFamily::HorizontalBars,
        ShapeFamily::VerticalBars,
        ShapeFamily::Checker,
        ShapeFamily::Box,
        ShapeFamily::Triangle,
        ShapeFamily::DotGrid,
        ShapeFamily::Diamond,
        ShapeFamily::Bullseye,
    ];

    /// Whether the point `(u, v)` (shape-local units, `v` pointing down) is ink.
    fn covers(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        let inside_square = |h: f64| u.abs() <= h && v.abs() <= h;
        match self {
            ShapeFamily::Disk => r <= 5.0,
            ShapeFamily::Ring => (r - 5.0).abs() <= 1.0,
            ShapeFamily::Plus => (u.abs() <= 1.2 && v.abs() <= 6.0) || (v.abs() <= 1.2 && u.abs() <= 6.0),
            ShapeFamily::Saltire => inside_square(5.0) && ((u - v).abs() <= 1.6 || (u + v).abs() <= 1.6),
            ShapeFamily::HorizontalBars => inside_square(6.0) && (v + 1.0).rem_euclid(4.0) < 2.0,
            ShapeFamily::VerticalBars => inside_square(6.0) && (u + 1.0).rem_euclid(4.0) < 2.0,
            ShapeFamily::Checker => {
                inside_square(6.0) && (((u + 6.0) / 4.0).floor() as i64 + ((v + 6.0) / 4.0).floor() as i64) % 2 == 0
            }
            ShapeFamily::Box => {
                let m = u.abs().max(v.abs());
                (4.5..=6.0).contains(&m)
            }
            ShapeFamily::Triangle => (-5.0..=5.0).contains(&v) && u.abs() <= (v + 5.0) * 0.6,
            ShapeFamily::DotGrid => {
                let du = u - 4.0 * (u / 4.0).round();
                let dv = v - 4.0 * (v / 4.0).round();
                inside_square(5.5) && (du * du + dv * dv).sqrt() <= 1.3
            }
            ShapeFamily::Diamond => (4.3..=6.3).contains(&(u.abs() + v.abs())),
            ShapeFamily::Bullseye => r <= 2.0 || (r - 5.5).abs() <= 0.9,
        }
    }
}

/// Parameters of the procedural toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec { num_classes: 10, train_per_class: 500, test_per_class: 100, seed: 0 }
    }
}

const SUPERSAMPLE: usize = 4;
const PIXEL_NOISE: f64 = 0.04;

fn render(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = IMAGE_SIZE as f64;
    let centre = (n - 1.0) / 2.0;
    let cx = centre + rng.random_range(-1.5..=1.5);
    let cy = centre + rng.random_range(-1.5..=1.5);
    let scale = rng.random_range(0.8..=1.1);
    let angle: f64 = rng.random_range(-0.15..=0.15);
    let ink = rng.random_range(0.65..=1.0);
    let (sin, cos) = angle.sin_cos();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");

    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5 - cy;
                    let u = (cos * x + sin * y) / scale;
                    let v = (-sin * x + cos * y) / scale;
                    hits += family.covers(u, v) as usize;
                }
            }
            let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let value = -1.0 + 2.0 * ink * coverage + noise.sample(rng);
            out.push(value.clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

fn render_split(spec: &ToySpec, split: Split, per_class: usize) -> Result<ImageSet, DataError> {
    let mut pixels = Vec::with_capacity(spec.num_classes * per_class * IMAGE_SIZE * IMAGE_SIZE);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
        Split::Synthetic => 3,
    };
    for (class, &family) in ShapeFamily::ALL.iter().take(spec.num_classes).enumerate() {
        for index in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, split_tag, class as u64, index as u64]));
            pixels.extend(render(family, &mut rng));
            labels.push(class);
        }
    }
    ImageSet::new((1, IMAGE_SIZE, IMAGE_SIZE), spec.num_classes, pixels, labels)
}

/// Renders the train and test splits. Each image draws from its own
/// `(seed, split, class, index)` stream, so the splits are disjoint.
pub fn generate_toy(spec: &ToySpec) -> Result<(RealDataset, RealDataset), DataError> {
    if spec.num_classes > ShapeFamily::ALL.len() {
        return Err(DataError::TooManyClasses { requested: spec.num_classes, available: ShapeFamily::ALL.len() });
    }
    if spec.num_classes == 0 {
        return Err(DataError::Invalid("toy dataset needs at least one class".into()));
    }
    let train = render_split(spec, Split::Train, spec.train_per_class)?;
    let test = render_split(spec, Split::Test, spec.test_per_class)?;
    Ok((RealDataset { split: Split::Train, images: train }, RealDataset { split: Split::Test, images: test }))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::sha256_hex;

    fn small() -> ToySpec {
        ToySpec { num_classes: 10, train_per_class: 30, test_per_class: 10, seed: 42 }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        assert_eq!(generate_toy(&small()).unwrap(), generate_toy(&small()).unwrap());
        let other = ToySpec { seed: 43, ..small() };
        assert_ne!(generate_toy(&small()).unwrap().0, generate_toy(&other).unwrap().0);
    }

    #[test]
    fn class_counts_are_exact() {
        let (train, test) = generate_toy(&small()).unwrap();
        assert_eq!(train.images.class_counts(), vec![30; 10]);
        assert_eq!(test.images.class_counts(), vec![10; 10]);
        assert_eq!(train.split, Split::Train);
    }

    #[test]
    fn splits_share_no_instance() {
        let (train, test) = generate_toy(&small()).unwrap();
        let hash = |img: &[f32]| {
            let bytes: Vec<u8> = img.iter().flat_map(|v| v.to_le_bytes()).collect();
            sha256_hex(&bytes)
        };
        let seen: HashSet<String> = (0..train.images.len()).map(|i| hash(train.images.image(i))).collect();
        assert_eq!(seen.len(), train.images.len());
        assert!((0..test.images.len()).all(|i| !seen.contains(&hash(test.images.image(i)))));
    }

    #[test]
    fn rejects_more_classes_than_families() {
        let spec = ToySpec { num_classes: 13, ..small() };
        assert!(matches!(generate_toy(&spec), Err(DataError::TooManyClasses { requested: 13, available: 12 })));
    }

    #[test]
    fn families_are_mirror_symmetric() {
        for family in ShapeFamily::ALL {
            for i in -60..=60 {
                for j in -60..=60 {
                    let (u, v) = (i as f64 * 0.1 + 0.013, j as f64 * 0.1 + 0.007);
                    assert_eq!(family.covers(u, v), family.covers(-u, v), "{family:?} at ({u}, {v})");
                }
            }
        }
    }
}
