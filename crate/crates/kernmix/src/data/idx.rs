//! IDX image/label files, as used by MNIST: big-endian magic, dimension
//! sizes, then raw bytes. Pixels scale by 1/255 on load; [`encode_images`]
//! and [`encode_labels`] invert the scaling bit-exactly.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: bytes.len() as u64,
        msg: format!("file ends before the 4 bytes at offset {offset}"),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image/label pair into a dataset of [n, h, w, 1] inputs in
/// [0, 1]. The class count is taken from the largest label present.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let magic = be_u32(&images, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} for images"),
        });
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let h = be_u32(&images, 8, images_path)? as usize;
    let w = be_u32(&images, 12, images_path)? as usize;
    let pixels = images.len().saturating_sub(16);
    if pixels != n * h * w {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 16,
            msg: format!("expected {} pixel bytes for {n}x{h}x{w}, found {pixels}", n * h * w),
        });
    }

    let labels_raw = read(labels_path)?;
    let magic = be_u32(&labels_raw, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x} for labels"),
        });
    }
    let label_count = be_u32(&labels_raw, 4, labels_path)? as usize;
    if labels_raw.len().saturating_sub(8) != label_count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 8,
            msg: format!(
                "expected {label_count} label bytes, found {}",
                labels_raw.len().saturating_sub(8)
            ),
        });
    }
    if label_count != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("{label_count} labels for {n} images"),
        });
    }

    let data: Vec<f64> = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, h, w, 1], data)?;
    let labels: Vec<usize> = labels_raw[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(name, inputs, labels, num_classes)
}

/// Serializes [0, 1] pixel values back to IDX image bytes.
pub fn encode_images(n: usize, h: usize, w: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != n * h * w {
        return Err(Error::InvalidArgument(format!(
            "{} pixels do not fill {n}x{h}x{w}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend(pixels.iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

/// Serializes labels back to IDX label bytes.
pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &label in labels {
        if label > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "label {label} does not fit an IDX byte"
            )));
        }
        out.push(label as u8);
    }
    Ok(out)
}
