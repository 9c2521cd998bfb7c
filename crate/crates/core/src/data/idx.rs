//! IDX (MNIST) reader and writer for unsigned-byte images and labels.

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)`; `pixels` holds all images back to back.
pub fn parse_idx_images<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(usize, usize, usize, &'a [u8])> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..needed]))
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok(&bytes[8..needed])
}

/// Loads an image/label IDX pair; pixels are scaled by 1/255.
pub fn load_idx(
    images_path: impl Into<PathBuf>,
    labels_path: impl Into<PathBuf>,
) -> Result<LabeledDataset<f32>> {
    let (images_path, labels_path) = (images_path.into(), labels_path.into());
    let image_bytes = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    let label_bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes, &images_path)?;
    let labels = parse_idx_labels(&label_bytes, &labels_path)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let numel = rows * cols;
    let inputs = if numel == 0 {
        vec![Tensor::new(vec![rows, cols], vec![])?; count]
    } else {
        pixels
            .chunks_exact(numel)
            .map(|img| {
                Tensor::new(
                    vec![rows, cols],
                    img.iter().map(|&p| p as f32 / 255.0).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    let labels = labels.iter().map(|&l| Some(l as usize)).collect();
    LabeledDataset::new(inputs, labels, Provenance::File)
}

/// Serializes a dataset of 2-D images back to `(images, labels)` IDX bytes.
/// Pixels are mapped back with `round(p * 255)`.
pub fn write_idx(ds: &LabeledDataset<f32>) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match ds.input_shape() {
        [r, c] => (*r, *c),
        [] if ds.is_empty() => (0, 0),
        other => {
            return Err(Error::InvalidConfig(format!(
                "IDX images must be 2-D, got shape {other:?}"
            )))
        }
    };
    let count = u32::try_from(ds.len())
        .map_err(|_| Error::InvalidConfig("too many items for IDX".into()))?;
    let mut images = Vec::with_capacity(16 + ds.len() * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&count.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for x in ds.inputs() {
        for &p in x.as_slice() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("pixel {p} outside [0, 1]")));
            }
            images.push((p * 255.0).round() as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&count.to_be_bytes());
    for l in ds.labels() {
        match l {
            Some(l) if *l <= u8::MAX as usize => labels.push(*l as u8),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "label {l:?} not representable in IDX"
                )))
            }
        }
    }
    Ok((images, labels))
}
