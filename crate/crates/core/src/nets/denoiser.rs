use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{conv_kernel, dense, normal, Params};
use super::{Condition, NetError};
use crate::autodiff::{Array, Tape, Var};
use crate::scalar::Scalar;

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    pub image_channels: usize,
    /// Channels at full resolution; the half-resolution level uses twice this.
    pub base_channels: usize,
    /// Width of the combined time/class embedding.
    pub embed_dim: usize,
    /// Largest accepted timestep (the training grid size).
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { num_classes: 10, image_channels: 1, base_channels: 12, embed_dim: 32, max_timestep: 400 }
    }
}

// Parameter slots, in registration order.
const TIME_W: usize = 0;
const TIME_B: usize = 1;
const CLASS_TABLE: usize = 2;
const PROJ_HI_W: usize = 3;
const PROJ_HI_B: usize = 4;
const PROJ_LO_W: usize = 5;
const PROJ_LO_B: usize = 6;
const IN_W: usize = 7;
const ENC_W: usize = 9;
const DOWN_W: usize = 11;
const MID_W: usize = 13;
const UP_W: usize = 15;
const DEC_W: usize = 17;
const OUT_W: usize = 19;

/// Conditional noise predictor: a two-level convolutional encoder-decoder
/// whose feature maps are shifted by a learned time + class embedding.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: Params<T>,
}

/// Sinusoidal features of integer timesteps, `[len, TIME_FEATURES]`.
pub fn timestep_features<T: Scalar>(timesteps: &[usize]) -> Array<T> {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(timesteps.len() * TIME_FEATURES);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t as f64 * f).sin(), (t as f64 * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::of));
    }
    Array::new(vec![timesteps.len(), TIME_FEATURES], data).expect("feature shape")
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, c1, ci) = (config.embed_dim, config.base_channels, config.image_channels);
        let c2 = 2 * c1;
        let mut p = Params::default();
        p.push("time.w", dense(&mut rng, TIME_FEATURES, e));
        p.push("time.b", Array::zeros(vec![e]));
        p.push("class_table", normal(&mut rng, vec![config.num_classes + 1, e], 1.0));
        p.push("proj_hi.w", dense(&mut rng, e, c1));
        p.push("proj_hi.b", Array::zeros(vec![c1]));
        p.push("proj_lo.w", dense(&mut rng, e, c2));
        p.push("proj_lo.b", Array::zeros(vec![c2]));
        for (name, c_out, c_in) in
            [("in", c1, ci), ("enc", c1, c1), ("down", c2, c1), ("mid", c2, c2), ("up", c1, c2), ("dec", c1, c1)]
        {
            p.push(format!("{name}.w"), conv_kernel(&mut rng, c_out, c_in, 3));
            p.push(format!("{name}.b"), Array::zeros(vec![c_out]));
        }
        // Output layer starts at zero so the initial prediction is exactly 0.
        p.push("out.w", Array::zeros(vec![ci, c1, 3, 3]));
        p.push("out.b", Array::zeros(vec![ci]));
        debug_assert_eq!(p.names()[OUT_W], "out.w");
        Denoiser { config, params: p }
    }

    /// Rebuilds a model around existing parameters; names and shapes must match.
    pub fn from_params(config: DenoiserConfig, params: Params<T>) -> Result<Self, NetError> {
        let template = Denoiser::<T>::new(config.clone(), 0);
        super::check_layout(&template.params, &params)?;
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { config: self.config.clone(), params: self.params.cast() }
    }

    fn check_inputs(&self, shape: &[usize], timesteps: &[usize], conds: &[Condition]) -> Result<Vec<usize>, NetError> {
        let ci = self.config.image_channels;
        if shape.len() != 4 || shape[1] != ci || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(NetError::InputShape { expected: format!("[batch, {ci}, even, even]"), got: shape.to_vec() });
        }
        if timesteps.len() != shape[0] || conds.len() != shape[0] {
            return Err(NetError::BatchMismatch {
                images: shape[0],
                timesteps: timesteps.len(),
                conditions: conds.len(),
            });
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > self.config.max_timestep) {
            return Err(NetError::TimestepOutOfRange { t, max: self.config.max_timestep });
        }
        conds.iter().map(|c| c.row(self.config.num_classes)).collect()
    }

    /// Records the forward pass on `tape`. `vars` are this model's registered
    /// parameters; `x` is `[batch, channels, h, w]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        timesteps: &[usize],
        conds: &[Condition],
    ) -> Result<Var, NetError> {
        let rows = self.check_inputs(tape.value(x).shape(), timesteps, conds)?;
        let p = |i: usize| vars[i];

        let feats = tape.constant(timestep_features(timesteps));
        let temb = tape.affine(feats, p(TIME_W), p(TIME_B))?;
        let temb = tape.silu(temb)?;
        let cemb = tape.embedding(p(CLASS_TABLE), &rows)?;
        let emb = tape.add(temb, cemb)?;
        let shift_hi = tape.affine(emb, p(PROJ_HI_W), p(PROJ_HI_B))?;
        let shift_lo = tape.affine(emb, p(PROJ_LO_W), p(PROJ_LO_B))?;

        let conv = |tape: &mut Tape<T>, h: Var, w: usize| tape.conv2d(h, p(w), Some(p(w + 1)));

        let h = conv(tape, x, IN_W)?;
        let h = tape.add_channel(h, shift_hi)?;
        let h = tape.silu(h)?;
        let h = conv(tape, h, ENC_W)?;
        let skip = tape.silu(h)?;

        let d = tape.avg_pool2(skip)?;
        let d = conv(tape, d, DOWN_W)?;
        let d = tape.add_channel(d, shift_lo)?;
        let d = tape.silu(d)?;
        let d = conv(tape, d, MID_W)?;
        let d = tape.silu(d)?;

        let u = conv(tape, d, UP_W)?;
        let u = tape.upsample2(u)?;
        let u = tape.add(u, skip)?;
        let u = tape.silu(u)?;
        let u = conv(tape, u, DEC_W)?;
        let u = tape.silu(u)?;
        Ok(conv(tape, u, OUT_W)?)
    }

    /// Inference-only prediction of the noise in `x`.
    pub fn predict(&self, x: &Array<T>, timesteps: &[usize], conds: &[Condition]) -> Result<Array<T>, NetError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, timesteps, conds)?;
        Ok(tape.value(out).clone())
    }
}
