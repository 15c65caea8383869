//! Checkpoint container: length-prefixed named parameter records in
//! little-endian `f32`, plus a JSON manifest of names, shapes and digests.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, json_err, sha256_hex, DataError};
use crate::autodiff::Array;
use crate::nets::{Classifier, ClassifierConfig, Denoiser, DenoiserConfig, Params};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SKCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    Denoiser(DenoiserConfig),
    Classifier(ClassifierConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ModelArch,
    pub params: Params<f32>,
    /// Free-form training context (scores, schedule, config digest).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arch: ModelArch,
    payload_sha256: String,
    params: Vec<ParamEntry>,
    metadata: serde_json::Value,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend(u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn record_bytes<T: Scalar>(name: &str, value: &Array<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + name.len() + 4 * value.len());
    put_u32(&mut buf, name.len());
    buf.extend(name.as_bytes());
    put_u32(&mut buf, value.shape().len());
    for &d in value.shape() {
        put_u32(&mut buf, d);
    }
    for v in value.data() {
        buf.extend((v.f64() as f32).to_le_bytes());
    }
    buf
}

/// Full payload: magic, version, record count, records.
pub(crate) fn encode_params<T: Scalar>(params: &Params<T>) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, params.len());
    for (name, value) in params.iter() {
        buf.extend(record_bytes(name, value));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at + n;
        let out = self.bytes.get(self.at..end).ok_or(DataError::Truncated {
            what: "checkpoint".into(),
            needed: end,
            available: self.bytes.len(),
        })?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }
}

fn decode_params(bytes: &[u8]) -> Result<Params<f32>, DataError> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(DataError::BadTag {
            what: "checkpoint".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
            expected: "SKCK".into(),
        });
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion {
            what: "checkpoint".into(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut params = Params::default();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DataError::Invalid("checkpoint parameter name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        let value = Array::new(shape, data).map_err(|e| DataError::Invalid(format!("parameter {name}: {e}")))?;
        params.push(name, value);
    }
    if r.at != bytes.len() {
        return Err(DataError::TrailingBytes { what: "checkpoint".into(), extra: bytes.len() - r.at });
    }
    Ok(params)
}

/// `model.ckpt` → `model.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Creates `path` and holds an exclusive lock while `contents` are written.
pub(crate) fn write_locked(path: &Path, contents: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut file = File::create(path).map_err(io_err(path))?;
    file.lock().map_err(io_err(path))?;
    file.write_all(contents).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))?;
    file.unlock().map_err(io_err(path))
}

impl Checkpoint {
    pub fn of_denoiser<T: Scalar>(model: &Denoiser<T>, metadata: serde_json::Value) -> Self {
        Checkpoint { arch: ModelArch::Denoiser(model.config().clone()), params: model.params().cast(), metadata }
    }

    pub fn of_classifier<T: Scalar>(model: &Classifier<T>, metadata: serde_json::Value) -> Self {
        Checkpoint { arch: ModelArch::Classifier(model.config().clone()), params: model.params().cast(), metadata }
    }

    pub fn digest(&self) -> String {
        super::params_digest(&self.params)
    }

    pub fn into_denoiser(self) -> Result<Denoiser<f32>, DataError> {
        match self.arch {
            ModelArch::Denoiser(config) => Ok(Denoiser::from_params(config, self.params)?),
            other => Err(DataError::Invalid(format!("checkpoint holds {other:?}, expected a denoiser"))),
        }
    }

    pub fn into_classifier(self) -> Result<Classifier<f32>, DataError> {
        match self.arch {
            ModelArch::Classifier(config) => Ok(Classifier::from_params(config, self.params)?),
            other => Err(DataError::Invalid(format!("checkpoint holds {other:?}, expected a classifier"))),
        }
    }
}

/// Writes the payload and its manifest; returns the payload digest.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String, DataError> {
    let payload = encode_params(&ckpt.params);
    let digest = sha256_hex(&payload);
    let manifest = Manifest {
        format: "SKCK".into(),
        version: CHECKPOINT_VERSION,
        arch: ckpt.arch.clone(),
        payload_sha256: digest.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(name, v)| ParamEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                sha256: sha256_hex(&record_bytes(name, v)),
            })
            .collect(),
        metadata: ckpt.metadata.clone(),
    };
    write_locked(path, &payload)?;
    let mpath = manifest_path(path);
    let json = serde_json::to_vec_pretty(&manifest).map_err(json_err(&mpath))?;
    write_locked(&mpath, &json)?;
    Ok(digest)
}

/// Reads a checkpoint, verifying every digest recorded in its manifest.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let mpath = manifest_path(path);
    let manifest_bytes = std::fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(json_err(&mpath))?;
    if manifest.format != "SKCK" {
        return Err(DataError::BadTag {
            what: "checkpoint manifest".into(),
            found: manifest.format,
            expected: "SKCK".into(),
        });
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion {
            what: "checkpoint manifest".into(),
            found: manifest.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let payload = std::fs::read(path).map_err(io_err(path))?;
    let computed = sha256_hex(&payload);
    if computed != manifest.payload_sha256 {
        return Err(DataError::DigestMismatch {
            what: path.display().to_string(),
            recorded: manifest.payload_sha256,
            computed,
        });
    }
    let params = decode_params(&payload)?;
    if params.len() != manifest.params.len() {
        return Err(DataError::Invalid(format!(
            "manifest lists {} parameters, payload holds {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for (entry, (name, value)) in manifest.params.iter().zip(params.iter()) {
        let computed = sha256_hex(&record_bytes(name, value));
        if entry.name != name || entry.shape != value.shape() || entry.sha256 != computed {
            return Err(DataError::DigestMismatch {
                what: format!("{} parameter {name}", path.display()),
                recorded: entry.sha256.clone(),
                computed,
            });
        }
    }
    Ok(Checkpoint { arch: manifest.arch, params, metadata: manifest.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Tier;

    fn sample() -> Checkpoint {
        let model = Classifier::<f32>::new(ClassifierConfig { tier: Tier::S, num_classes: 4, image_channels: 1 }, 9);
        Checkpoint::of_classifier(&model, serde_json::json!({"test_accuracy": 0.5}))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        let digest = save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(digest, ckpt.digest());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let model = back.into_classifier().unwrap();
        assert_eq!(model.tier(), Tier::S);
    }

    #[test]
    fn corrupted_payload_byte_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, DataError::DigestMismatch { .. }), "{err}");
        assert!(err.to_string().contains("regenerate"));
    }

    #[test]
    fn bumped_version_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mpath = manifest_path(&path);
        let text = std::fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 2");
        std::fs::write(&mpath, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            DataError::UnsupportedVersion { found: 2, supported: 1, .. }
        ));
    }

    #[test]
    fn payload_version_is_checked_too() {
        let mut bytes = encode_params(&sample().params);
        bytes[4] = 9;
        assert!(matches!(decode_params(&bytes), Err(DataError::UnsupportedVersion { found: 9, .. })));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        assert!(sample().into_denoiser().is_err());
    }
}
