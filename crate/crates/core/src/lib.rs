//! Synthetic-data knowledge distillation at desk scale: a small reverse-mode
//! autodiff engine, a class-conditional diffusion model with classifier-free
//! guidance, temperature-scaled distillation and the metrics around them.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod scalar;
pub mod seed;

pub use scalar::Scalar;

pub type Array32 = autodiff::Array<f32>;
pub type Array64 = autodiff::Array<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Denoiser32 = nets::Denoiser<f32>;
pub type Denoiser64 = nets::Denoiser<f64>;
pub type Classifier32 = nets::Classifier<f32>;
pub type Classifier64 = nets::Classifier<f64>;
