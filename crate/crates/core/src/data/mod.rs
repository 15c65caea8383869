//! Datasets and persistence: procedural toy images, IDX ingestion, the
//! synthetic-dataset container and model checkpoints.

mod checkpoint;
mod digest;
mod idx;
mod images;
mod quant;
mod skds;
mod toy;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelArch, CHECKPOINT_VERSION};
pub use digest::{params_digest, sha256_hex};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, resample_area, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use images::{ImageSet, RealDataset, Split};
pub use quant::{dequantize, quantize};
pub use skds::{load_synthetic, save_synthetic, sidecar_path, SKDS_VERSION};
pub use toy::{generate_toy, ShapeFamily, ToySpec};

/// Side length of toy images.
pub const IMAGE_SIZE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{what}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { what: String, found: u32, expected: u32 },
    #[error("{what}: bad magic {found:?}, expected {expected:?}")]
    BadTag { what: String, found: String, expected: String },
    #[error("{what}: unsupported format version {found} (this build reads version {supported}); regenerate the file with this build")]
    UnsupportedVersion { what: String, found: u32, supported: u32 },
    #[error("{what}: digest mismatch (recorded {recorded}, computed {computed}); the file is corrupt or was modified, regenerate it")]
    DigestMismatch { what: String, recorded: String, computed: String },
    #[error("{what}: truncated payload (need {needed} bytes, have {available})")]
    Truncated { what: String, needed: usize, available: usize },
    #[error("{what}: trailing {extra} bytes after payload")]
    TrailingBytes { what: String, extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("pixel value {value} outside [-1, 1] at index {index}")]
    PixelRange { value: f32, index: usize },
    #[error("{requested} classes requested but only {available} shape families exist")]
    TooManyClasses { requested: usize, available: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] crate::nets::NetError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub(crate) fn json_err(path: &std::path::Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json { path: path.display().to_string(), source }
}
