//! `BTMDATA1` dataset container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` header length, the JSON
//! header, labels as little-endian `u32`, then features as little-endian
//! `f32` in row-major order. Sample ids are not stored; a loaded dataset
//! numbers its rows `0..n`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{BtmError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"BTMDATA1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&DatasetHeader {
            version: VERSION,
            n_samples: self.len(),
            dim: self.dim(),
            n_classes: self.n_classes(),
            name: self.name().to_owned(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.len() * (1 + self.dim()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &label in self.labels() {
            out.extend_from_slice(&(label as u32).to_le_bytes());
        }
        for &x in self.features().iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| BtmError::BadContainer(msg);
        if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
            return Err(bad("missing BTMDATA1 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: DatasetHeader = serde_json::from_slice(header_bytes)?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let labels_at = 12 + header_len;
        let features_at = labels_at + 4 * header.n_samples;
        let end = features_at + 4 * header.n_samples * header.dim;
        if bytes.len() != end {
            return Err(bad(format!("expected {end} bytes, found {}", bytes.len())));
        }
        let labels = bytes[labels_at..features_at]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let features = bytes[features_at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let features = Array2::from_shape_vec((header.n_samples, header.dim), features)
            .map_err(|e| bad(e.to_string()))?;
        LabeledDataset::new(features, labels, header.n_classes, header.name)
    }
}

pub fn write_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::generate_gaussian_mixture;

    #[test]
    fn round_trip_is_exact() {
        let d = generate_gaussian_mixture(3, 4, 2.5, 7, 1).unwrap();
        let bytes = d.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"BTMDATA1");
        let back = LabeledDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let d = generate_gaussian_mixture(2, 2, 1.0, 1, 0).unwrap();
        let bytes = d.to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert!(header
            .starts_with("{\"version\":1,\"n_samples\":2,\"dim\":2,\"n_classes\":2,\"name\":"));
        assert_eq!(bytes.len(), 12 + len + 2 * 4 + 2 * 2 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let d = generate_gaussian_mixture(2, 2, 1.0, 3, 0).unwrap();
        let mut bytes = d.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes),
            Err(BtmError::BadContainer(_))
        ));
        assert!(LabeledDataset::from_bytes(b"BTMDATA0\0\0\0\0").is_err());
    }
}
