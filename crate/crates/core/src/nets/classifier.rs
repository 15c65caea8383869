use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{conv_kernel, dense, Params};
use super::NetError;
use crate::autodiff::{Array, Tape, Var};
use crate::scalar::Scalar;

/// Capacity ladder for teachers and students.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    S,
    M,
    L,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::S, Tier::M, Tier::L];

    /// Output channels of each conv block.
    pub fn widths(self) -> &'static [usize] {
        match self {
            Tier::S => &[8, 16],
            Tier::M => &[16, 32, 64],
            Tier::L => &[32, 64, 128, 256],
        }
    }

    pub fn param_count(self, image_channels: usize, num_classes: usize) -> usize {
        let mut c_in = image_channels;
        let mut total = 0;
        for &w in self.widths() {
            total += w * c_in * 9 + w;
            c_in = w;
        }
        total + c_in * num_classes + num_classes
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tier::S => "S",
            Tier::M => "M",
            Tier::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for Tier {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Tier::S),
            "M" => Ok(Tier::M),
            "L" => Ok(Tier::L),
            _ => Err(NetError::UnknownTier(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub tier: Tier,
    pub num_classes: usize,
    pub image_channels: usize,
}

/// Conv/ReLU/avg-pool stack with global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: Params<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let (ci, k) = (config.image_channels, config.num_classes);
        assert!(
            Tier::S.param_count(ci, k) < Tier::M.param_count(ci, k)
                && Tier::M.param_count(ci, k) < Tier::L.param_count(ci, k),
            "capacity tiers must be strictly ordered by parameter count"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let mut c_in = ci;
        for (i, &w) in config.tier.widths().iter().enumerate() {
            p.push(format!("conv{i}.w"), conv_kernel(&mut rng, w, c_in, 3));
            p.push(format!("conv{i}.b"), Array::zeros(vec![w]));
            c_in = w;
        }
        p.push("fc.w", dense(&mut rng, c_in, k));
        p.push("fc.b", Array::zeros(vec![k]));
        Classifier { config, params: p }
    }

    pub fn from_params(config: ClassifierConfig, params: Params<T>) -> Result<Self, NetError> {
        let template = Classifier::<T>::new(config.clone(), 0);
        super::check_layout(&template.params, &params)?;
        Ok(Classifier { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn tier(&self) -> Tier {
        self.config.tier
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier { config: self.config.clone(), params: self.params.cast() }
    }

    /// Records the forward pass; returns `[batch, num_classes]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var, NetError> {
        let shape = tape.value(x).shape();
        let blocks = self.config.tier.widths().len();
        let div = 1 << (blocks - 1);
        if shape.len() != 4
            || shape[1] != self.config.image_channels
            || !shape[2].is_multiple_of(div)
            || !shape[3].is_multiple_of(div)
        {
            return Err(NetError::InputShape {
                expected: format!("[batch, {}, h, w] with h, w divisible by {div}", self.config.image_channels),
                got: shape.to_vec(),
            });
        }
        let mut h = x;
        for i in 0..blocks {
            h = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]))?;
            h = tape.relu(h)?;
            if i + 1 < blocks {
                h = tape.avg_pool2(h)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok(tape.affine(pooled, vars[2 * blocks], vars[2 * blocks + 1])?)
    }

    /// Inference-only logits for a batch `[batch, channels, h, w]`.
    pub fn logits(&self, x: &Array<T>) -> Result<Array<T>, NetError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }
}
