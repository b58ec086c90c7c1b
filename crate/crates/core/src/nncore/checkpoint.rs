//! `BTMCKPT1` checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` header length, the JSON
//! header, then the flat weights as little-endian `f32`. Parameters are
//! rounded to f32 when a checkpoint is built, so the in-memory model and the
//! one read back from disk are identical.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, ParamVector};
use crate::error::{BtmError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BTMCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: Architecture,
    pub stage_tag: String,
    pub seed: u64,
    pub parent_checkpoint_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    params: ParamVector,
    stage_tag: String,
    seed: u64,
    parent_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(
        params: &ParamVector,
        stage_tag: impl Into<String>,
        seed: u64,
        parent_hash: Option<String>,
    ) -> Self {
        Self {
            params: params.quantized(),
            stage_tag: stage_tag.into(),
            seed,
            parent_hash,
        }
    }

    /// Child checkpoint whose parent hash points at `self`.
    pub fn derive(&self, params: &ParamVector, stage_tag: impl Into<String>, seed: u64) -> Self {
        Self::new(params, stage_tag, seed, Some(self.hash()))
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn arch(&self) -> &Architecture {
        self.params.arch()
    }

    pub fn stage_tag(&self) -> &str {
        &self.stage_tag
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parent_hash(&self) -> Option<&str> {
        self.parent_hash.as_deref()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            version: VERSION,
            arch: self.arch().clone(),
            stage_tag: self.stage_tag.clone(),
            seed: self.seed,
            parent_checkpoint_hash: self.parent_hash.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &v in self.params.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| BtmError::BadContainer(msg);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing BTMCKPT1 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(
            bytes
                .get(12..12 + header_len)
                .ok_or_else(|| bad("truncated header".into()))?,
        )?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        header.arch.validate()?;
        let body = &bytes[12 + header_len..];
        if body.len() != 4 * header.arch.param_count() {
            return Err(bad(format!(
                "expected {} weight bytes, found {}",
                4 * header.arch.param_count(),
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            params: ParamVector::new(values, header.arch)?,
            stage_tag: header.stage_tag,
            seed: header.seed,
            parent_hash: header.parent_checkpoint_hash,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// SHA-256 over the f32 bytes of a parameter slice.
    pub fn slice_hash(&self, range: Range<usize>) -> String {
        let mut hasher = Sha256::new();
        for &v in &self.params.values()[range] {
            hasher.update((v as f32).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn backbone_hash(&self) -> String {
        self.slice_hash(self.arch().backbone_range())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
