//! Synthetic-dataset container: a little-endian header, one
//! `(label u16, pixels u8…)` record per image and a JSON provenance sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::write_locked;
use super::{io_err, json_err, sha256_hex, DataError};
use crate::diffusion::{Provenance, SyntheticDataset};

pub const SKDS_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SKDS";
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 2 + 2 + 2;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    count: usize,
    num_classes: usize,
    payload_sha256: String,
    provenance: Provenance,
}

/// `synth.skds` → `synth.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn narrow<U: TryFrom<usize>>(v: usize, what: &str) -> Result<U, DataError> {
    U::try_from(v).map_err(|_| DataError::Invalid(format!("{what} {v} does not fit the header field")))
}

fn encode(ds: &SyntheticDataset) -> Result<Vec<u8>, DataError> {
    let (c, h, w) = ds.geometry();
    let image_len = c * h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * (2 + image_len));
    buf.extend(MAGIC);
    buf.extend(SKDS_VERSION.to_le_bytes());
    buf.extend(narrow::<u32>(ds.len(), "image count")?.to_le_bytes());
    buf.push(narrow::<u8>(c, "channel count")?);
    buf.extend(narrow::<u16>(h, "height")?.to_le_bytes());
    buf.extend(narrow::<u16>(w, "width")?.to_le_bytes());
    buf.extend(narrow::<u16>(ds.num_classes(), "class count")?.to_le_bytes());
    for (label, img) in ds.labels().iter().zip(ds.pixels().chunks(image_len)) {
        buf.extend((*label as u16).to_le_bytes());
        buf.extend(img);
    }
    Ok(buf)
}

fn decode(bytes: &[u8], provenance: Provenance) -> Result<SyntheticDataset, DataError> {
    let what = || "synthetic dataset".to_string();
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { what: what(), needed: HEADER_LEN, available: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadTag {
            what: what(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: "SKDS".into(),
        });
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
    let version = u32_at(4);
    if version != SKDS_VERSION {
        return Err(DataError::UnsupportedVersion { what: what(), found: version, supported: SKDS_VERSION });
    }
    let count = u32_at(8) as usize;
    let geometry = (bytes[12] as usize, u16_at(13), u16_at(15));
    let num_classes = u16_at(17);
    let image_len = geometry.0 * geometry.1 * geometry.2;
    let needed = HEADER_LEN + count * (2 + image_len);
    if bytes.len() < needed {
        return Err(DataError::Truncated { what: what(), needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(DataError::TrailingBytes { what: what(), extra: bytes.len() - needed });
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * image_len);
    for record in bytes[HEADER_LEN..].chunks_exact(2 + image_len) {
        let label = u16::from_le_bytes([record[0], record[1]]) as usize;
        if label >= num_classes {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        labels.push(label);
        pixels.extend_from_slice(&record[2..]);
    }
    SyntheticDataset::new(geometry, num_classes, pixels, labels, provenance)
        .map_err(|e| DataError::Invalid(e.to_string()))
}

/// Writes the dataset and its sidecar; returns the payload digest.
pub fn save_synthetic(path: &Path, ds: &SyntheticDataset) -> Result<String, DataError> {
    let payload = encode(ds)?;
    let digest = sha256_hex(&payload);
    let sidecar = Sidecar {
        format: "SKDS".into(),
        version: SKDS_VERSION,
        count: ds.len(),
        num_classes: ds.num_classes(),
        payload_sha256: digest.clone(),
        provenance: ds.provenance.clone(),
    };
    write_locked(path, &payload)?;
    let spath = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar).map_err(json_err(&spath))?;
    write_locked(&spath, &json)?;
    Ok(digest)
}

/// Reads a dataset, verifying the payload digest recorded in its sidecar.
pub fn load_synthetic(path: &Path) -> Result<SyntheticDataset, DataError> {
    let spath = sidecar_path(path);
    let raw = std::fs::read(&spath).map_err(io_err(&spath))?;
    let sidecar: Sidecar = serde_json::from_slice(&raw).map_err(json_err(&spath))?;
    if sidecar.version != SKDS_VERSION {
        return Err(DataError::UnsupportedVersion {
            what: spath.display().to_string(),
            found: sidecar.version,
            supported: SKDS_VERSION,
        });
    }
    let payload = std::fs::read(path).map_err(io_err(path))?;
    let computed = sha256_hex(&payload);
    if computed != sidecar.payload_sha256 {
        return Err(DataError::DigestMismatch {
            what: path.display().to_string(),
            recorded: sidecar.payload_sha256,
            computed,
        });
    }
    let ds = decode(&payload, sidecar.provenance)?;
    if ds.len() != sidecar.count || ds.num_classes() != sidecar.num_classes {
        return Err(DataError::Invalid(format!(
            "sidecar describes {} images of {} classes, payload holds {} of {}",
            sidecar.count,
            sidecar.num_classes,
            ds.len(),
            ds.num_classes()
        )));
    }
    Ok(ds)
}
