//! Big-endian IDX containers (`ubyte` images and labels).

use std::path::Path;

use super::images::{ImageSet, RealDataset, Split};
use super::{io_err, DataError, IMAGE_SIZE};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| DataError::Truncated { what: what.to_string(), needed: at + 4, available: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DataError::BadMagic { what: what.to_string(), found, expected });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8], DataError> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(DataError::Truncated { what: what.to_string(), needed: end, available: bytes.len() });
    }
    if bytes.len() > end {
        return Err(DataError::TrailingBytes { what: what.to_string(), extra: bytes.len() - end });
    }
    Ok(&bytes[offset..end])
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let what = "IDX images";
    check_magic(bytes, IDX_IMAGES_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let data = payload(bytes, 16, n * rows * cols, what)?;
    Ok((n, rows, cols, data.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let what = "IDX labels";
    check_magic(bytes, IDX_LABELS_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    Ok(payload(bytes, 8, n, what)?.to_vec())
}

/// Overlap weights mapping `src` cells onto `dst` cells of equal total length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(src))
                .filter_map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)) / ratio;
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resample of one `rows×cols` plane to `out_rows×out_cols`.
pub fn resample_area(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let wy = area_weights(rows, out_rows);
    let wx = area_weights(cols, out_cols);
    let mut out = vec![0.0; out_rows * out_cols];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, a) in ys {
                for &(sx, b) in xs {
                    acc += a * b * src[sy * cols + sx];
                }
            }
            out[oy * out_cols + ox] = acc;
        }
    }
    out
}

/// Loads an IDX image/label pair, rescaling pixels to `[-1, 1]` and
/// resampling each image to 16×16. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RealDataset, DataError> {
    let image_bytes = std::fs::read(images_path).map_err(io_err(images_path))?;
    let label_bytes = std::fs::read(labels_path).map_err(io_err(labels_path))?;
    idx_dataset(&image_bytes, &label_bytes)
}

pub(crate) fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RealDataset, DataError> {
    let (n, rows, cols, raw) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 {
        return Err(DataError::Invalid("IDX file holds no images".into()));
    }
    let mut pixels = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE);
    for img in raw.chunks(rows * cols) {
        let scaled: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0 * 2.0 - 1.0).collect();
        let resized = if (rows, cols) == (IMAGE_SIZE, IMAGE_SIZE) {
            scaled
        } else {
            resample_area(&scaled, rows, cols, IMAGE_SIZE, IMAGE_SIZE)
        };
        pixels.extend(resized.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32));
    }
    let num_classes = *labels.iter().max().expect("nonempty") as usize + 1;
    let labels = labels.into_iter().map(usize::from).collect();
    let images = ImageSet::new((1, IMAGE_SIZE, IMAGE_SIZE), num_classes, pixels, labels)?;
    Ok(RealDataset { split: Split::Train, images })
}
