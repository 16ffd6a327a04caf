//! Checkpoint container: magic bytes `SPGATCKPT`, a `u32` format
//! version, a JSON metadata blob (length-prefixed), then one record per
//! tensor: `u32` name length, name bytes, `u32` rank, `u32` dims,
//! little-endian `f32` payload. Records are written in name order so a
//! save/load/save cycle is byte-identical.
//!
//! The reader treats input as untrusted: lengths are bounded against
//! the remaining bytes before anything is allocated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RatioMode, TrainConfig};
use crate::loss::LossWeights;
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 9] = b"SPGATCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_META_LEN: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata does not parse: {0}")]
    BadMeta(#[from] serde_json::Error),
    #[error("checkpoint does not match the model: {0}")]
    ConfigMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Everything needed to resume: the resolved training configuration
/// and the optimizer/step state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: u64,
    pub steps_since_disc: u64,
    pub adam_t: [u64; 3],
}

impl CheckpointMeta {
    pub fn fresh(config: TrainConfig) -> Self {
        CheckpointMeta {
            config,
            step: 0,
            steps_since_disc: 0,
            adam_t: [0; 3],
        }
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Named tensors: parameters plus `adam.*` moment buffers.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!(
                "truncated while reading {what} ({n} bytes at offset {})",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, (shape, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic").map(|m| m != MAGIC).unwrap_or(true) {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        if meta_len > MAX_META_LEN {
            return Err(CheckpointError::Corrupt(format!(
                "metadata length {meta_len} exceeds the {MAX_META_LEN} cap"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

        let mut tensors = BTreeMap::new();
        while !r.done() {
            let name_len = r.u32("name length")? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(CheckpointError::Corrupt(format!(
                    "record name length {name_len} out of range"
                )));
            }
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| CheckpointError::Corrupt("record name is not utf-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::Corrupt(format!(
                    "record {name}: rank {rank} out of range"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = r.u32("dimension")? as usize;
                count = count
                    .checked_mul(d)
                    .filter(|&c| c <= r.remaining() / 4 + 1)
                    .ok_or_else(|| {
                        CheckpointError::Corrupt(format!("record {name}: dims overflow payload"))
                    })?;
                shape.push(d);
            }
            if count == 0 {
                return Err(CheckpointError::Corrupt(format!(
                    "record {name}: zero-sized dimension"
                )));
            }
            let payload = r.take(count * 4, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(CheckpointError::Corrupt(format!(
                    "duplicate record name {name}"
                )));
            }
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn default_train_config(model: ModelConfig) -> TrainConfig {
    TrainConfig {
        lr0: 1e-4,
        lr_halving_epochs: 30,
        epochs: 150,
        batch: 2,
        crop: 128,
        r: 5,
        ratio_mode: RatioMode::DiscOncePerR,
        seed: 0,
        weights: LossWeights::default(),
        model,
        max_steps: None,
        checkpoint_every: 1000,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), (vec![2, 3], vec![1.0f32; 6]));
        tensors.insert("b.g".to_string(), (vec![4], vec![0.25f32, -1.0, 3.5, 0.0]));
        Checkpoint {
            meta: CheckpointMeta::fresh(default_train_config(ModelConfig::default())),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors["b.g"].1, vec![0.25, -1.0, 3.5, 0.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&[]),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_and_oversized_dims_rejected() {
        let bytes = sample().to_bytes();
        for cut in [5, 12, 20, bytes.len() - 3] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        // A record that claims a huge dim must fail before allocating.
        let mut evil = Vec::new();
        evil.extend_from_slice(MAGIC);
        evil.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&sample().meta).unwrap();
        evil.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        evil.extend_from_slice(&meta);
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(b"ab");
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&evil),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn version_gate() {
        let mut bytes = sample().to_bytes();
        bytes[9] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadVersion(9))
        ));
    }
}
