//! Big-endian IDX files (MNIST layout): `idx3-ubyte` images, `idx1-ubyte` labels.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::LabeledDataset;
use crate::error::{BtmError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| BtmError::TruncatedIdx {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(BtmError::BadIdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| BtmError::TruncatedIdx {
            path: path.to_path_buf(),
            expected: offset + len,
            found: bytes.len(),
        })
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]` and
/// flattened row-major. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let dim = rows * cols;
    let pixels = payload(&images, 16, n_images * dim, images_path)?;

    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    let raw_labels = payload(&labels, 8, n_labels, labels_path)?;

    if n_images != n_labels {
        return Err(BtmError::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let features = Array2::from_shape_vec(
        (n_images, dim),
        pixels
            .iter()
            .map(|&p| ((p as f32) / 255.0) as f64)
            .collect(),
    )
    .expect("payload length matches shape");
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(features, labels, n_classes, name)
}
