//! Paired low/normal-light dataset: `<root>/low/<name>.png` matched to
//! `<root>/high/<name>.png` by filename. Images are decoded once into
//! memory; batches are aligned random crops with structure maps
//! recomputed per crop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::imageio;
use crate::model::{extract_structure, StructurePrior};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read dataset directory {0}: {1}")]
    Scan(String, std::io::Error),
    #[error("{0}")]
    Image(#[from] imageio::ImageIoError),
    #[error("no usable image pairs under {0}")]
    Empty(String),
    #[error("{0}")]
    Invalid(String),
}

pub struct LoadedPair {
    pub name: String,
    pub low: Tensor<f32>,  // (1, H, W, 3)
    pub high: Tensor<f32>, // (1, H, W, 3)
}

pub struct PairedDataset {
    pub pairs: Vec<LoadedPair>,
    /// Pairs skipped at load time, with reasons.
    pub warnings: Vec<String>,
}

fn list_pngs(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| DataError::Scan(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Scan(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

impl PairedDataset {
    /// Scan and decode every pair; unpaired or sub-`min_size` files are
    /// skipped with a warning rather than failing the run.
    pub fn load(root: &Path, min_size: usize) -> Result<Self, DataError> {
        let lows = list_pngs(&root.join("low"))?;
        let highs = list_pngs(&root.join("high"))?;
        let mut pairs = Vec::new();
        let mut warnings = Vec::new();
        for (name, low_path) in &lows {
            let Some(high_path) = highs.get(name) else {
                warnings.push(format!("{name}: no matching file under high/, skipped"));
                continue;
            };
            let low = imageio::load_png(low_path)?;
            let high = imageio::load_png(high_path)?;
            if low.shape() != high.shape() {
                warnings.push(format!(
                    "{name}: low {:?} vs high {:?} size mismatch, skipped",
                    low.shape(),
                    high.shape()
                ));
                continue;
            }
            let (h, w) = (low.shape()[1], low.shape()[2]);
            if h < min_size || w < min_size {
                warnings.push(format!(
                    "{name}: {h}x{w} smaller than the {min_size} crop, skipped"
                ));
                continue;
            }
            pairs.push(LoadedPair {
                name: name.clone(),
                low,
                high,
            });
        }
        for name in highs.keys() {
            if !lows.contains_key(name) {
                warnings.push(format!("{name}: no matching file under low/, skipped"));
            }
        }
        if pairs.is_empty() {
            return Err(DataError::Empty(root.display().to_string()));
        }
        Ok(PairedDataset { pairs, warnings })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Aligned random crops of `batch` sampled pairs, with structure
    /// maps derived from the crops (not pre-crop).
    pub fn sample_batch(
        &self,
        crop: usize,
        batch: usize,
        prior: StructurePrior,
        rng: &mut impl Rng,
    ) -> Result<Batch, DataError> {
        let mut low = Vec::with_capacity(batch * crop * crop * 3);
        let mut high = Vec::with_capacity(batch * crop * crop * 3);
        for _ in 0..batch {
            let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
            let (h, w) = (pair.low.shape()[1], pair.low.shape()[2]);
            let ry = rng.random_range(0..=h - crop);
            let rx = rng.random_range(0..=w - crop);
            for (src, dst) in [(&pair.low, &mut low), (&pair.high, &mut high)] {
                let data = src.data();
                for r in 0..crop {
                    let base = ((ry + r) * w + rx) * 3;
                    dst.extend_from_slice(&data[base..base + crop * 3]);
                }
            }
        }
        let shape = [batch, crop, crop, 3];
        let low = Tensor::from_vec(&shape, low).map_err(|e| DataError::Invalid(e.to_string()))?;
        let high = Tensor::from_vec(&shape, high).map_err(|e| DataError::Invalid(e.to_string()))?;
        let (s, p) = if prior == StructurePrior::Off {
            (None, None)
        } else {
            let s = extract_structure(&low, prior).map_err(|e| DataError::Invalid(e.to_string()))?;
            let p = extract_structure(&high, prior).map_err(|e| DataError::Invalid(e.to_string()))?;
            (Some(s), Some(p))
        };
        Ok(Batch { low, high, s, p })
    }
}

/// One training batch: aligned crops plus their structure maps.
pub struct Batch {
    pub low: Tensor<f32>,
    pub high: Tensor<f32>,
    pub s: Option<Tensor<f32>>,
    pub p: Option<Tensor<f32>>,
}
