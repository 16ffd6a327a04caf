//! ADAM optimization of generator+SPE against the two discriminators:
//! alternating updates on the configured ratio, deterministic batch
//! streams derived from (seed, step), and checkpointing.

mod adam;
mod checkpoint;
mod data;

pub use adam::{adam_step, lr_at, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, MAGIC, VERSION};
pub use data::{Batch, DataError, PairedDataset};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{
    loss_adv_disc, loss_adv_gen, loss_total, LossBreakdown, LossWeights,
};
use crate::model::{DiscMode, ModelConfig, ModelOutput, SpgatModel};
use crate::nn::ParameterStore;
use crate::tensor::{backward, no_grad, with_nan_check, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}; first offending op: {op}")]
    NonFinite { step: u64, op: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Who trains more often. The default reading updates the
/// discriminators once every `r` generator steps; the inverse exists so
/// the ratio axis can be explored both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    DiscOncePerR,
    GenOncePerR,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halving_epochs: u64,
    pub epochs: u64,
    pub batch: usize,
    pub crop: usize,
    pub r: u64,
    pub ratio_mode: RatioMode,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        checkpoint::default_train_config(ModelConfig::default())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.r < 1 {
            return Err(TrainError::Config("r must be at least 1".into()));
        }
        if self.crop < 16 || self.crop % 16 != 0 {
            return Err(TrainError::Config(format!(
                "crop {} must be a positive multiple of 16",
                self.crop
            )));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(TrainError::Config("lr0 must be positive".into()));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Scalar adversarial losses of one discriminator update.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiscLosses {
    pub enc: f64,
    pub dec: f64,
}

/// What one outer step did.
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub gen: Option<LossBreakdown>,
    pub disc: Option<DiscLosses>,
}

fn mix(seed: u64, step: u64, tag: u64) -> u64 {
    let mut z = seed
        ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_GEN_BATCH: u64 = 1;
const TAG_DISC_BATCH: u64 = 2;

pub struct Trainer {
    pub model: SpgatModel<f32>,
    pub cfg: TrainConfig,
    adam_gen: AdamState,
    adam_de: AdamState,
    adam_dd: AdamState,
    /// Outer steps taken (generator steps under the default ratio mode).
    pub step: u64,
    steps_since_disc: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = SpgatModel::new(&cfg.model, cfg.seed)?;
        Ok(Trainer {
            model,
            cfg,
            adam_gen: AdamState::new(),
            adam_de: AdamState::new(),
            adam_dd: AdamState::new(),
            step: 0,
            steps_since_disc: 0,
        })
    }

    pub fn adversarial_active(&self) -> bool {
        self.cfg.weights.beta > 0.0 && self.cfg.model.discriminators != DiscMode::Off
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len as u64).div_ceil(self.cfg.batch as u64).max(1)
    }

    pub fn lr_for_step(&self, step: u64, dataset_len: usize) -> f64 {
        let epoch = step / self.steps_per_epoch(dataset_len);
        lr_at(self.cfg.lr0, self.cfg.lr_halving_epochs, epoch)
    }

    /// Image+structure stack the discriminators consume.
    fn disc_input(
        &self,
        image: &Tensor<f32>,
        structure: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>, TensorError> {
        match structure {
            Some(s) => Tensor::concat(&[image.clone(), s.clone()], 3),
            None => Ok(image.clone()),
        }
    }

    /// Logit maps for the encoder-feature and decoder-feature
    /// discriminators. In single mode one net serves both routes.
    fn disc_logits(
        &self,
        input: &Tensor<f32>,
        out: &ModelOutput<f32>,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>), TensorError> {
        let d_e = self.model.disc_e.as_ref().expect("adversarial mode");
        let spe_enc = out.spe_feats.as_ref().map(|f| f.enc.clone());
        let spe_dec = out.spe_feats.as_ref().map(|f| f.dec_by_resolution());
        let enc = d_e.forward(input, Some(&out.gen_feats.enc), spe_enc.as_deref())?;
        let dec_feats = out.gen_feats.dec_by_resolution();
        let dec = match self.model.cfg.discriminators {
            DiscMode::Dual => {
                let d_d = self.model.disc_d.as_ref().expect("dual mode");
                Some(d_d.forward(input, Some(&dec_feats), spe_dec.as_deref())?)
            }
            DiscMode::Single => Some(d_e.forward(input, Some(&dec_feats), spe_dec.as_deref())?),
            DiscMode::Off => None,
        };
        Ok((enc, dec))
    }

    /// Fake pass (low-light in) with gradients; real pass (normal-light
    /// in) detached. Returns the total loss tensor plus its breakdown.
    fn gen_forward(&self, batch: &Batch) -> Result<(Tensor<f32>, LossBreakdown), TensorError> {
        let out = self.model.forward_pair(&batch.low, batch.s.as_ref())?;
        let e_hat = out.image.clamp_st(0.0, 1.0)?;
        let (adv_e, adv_d) = if self.adversarial_active() {
            let fake_in = self.disc_input(&e_hat, out.structure.as_ref())?;
            let (fake_enc, fake_dec) = self.disc_logits(&fake_in, &out)?;
            let (real_enc, real_dec) = no_grad(|| {
                let real = self.model.forward_pair(&batch.high, batch.p.as_ref())?;
                let real_img = real.image.clamp_st(0.0, 1.0)?;
                let real_in = self.disc_input(&real_img, real.structure.as_ref())?;
                self.disc_logits(&real_in, &real)
            })?;
            let adv_e = loss_adv_gen(&real_enc, &fake_enc)?;
            let adv_d = match (real_dec, fake_dec) {
                (Some(r), Some(f)) => Some(loss_adv_gen(&r, &f)?),
                _ => None,
            };
            (Some(adv_e), adv_d)
        } else {
            (None, None)
        };
        loss_total(
            &e_hat,
            &batch.high,
            out.structure.as_ref(),
            batch.p.as_ref(),
            adv_e.as_ref(),
            adv_d.as_ref(),
            &self.cfg.weights,
        )
    }

    fn diagnose_nan(&self, err_op: &str, rerun: impl Fn() -> Result<(), TensorError>) -> String {
        match with_nan_check(rerun) {
            Err(TensorError::NonFinite { op }) => op.to_string(),
            _ => err_op.to_string(),
        }
    }

    /// One generator+SPE update; discriminator parameters are left
    /// untouched (their gradients are simply never applied).
    pub fn generator_step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown, TrainError> {
        let (total, breakdown) = self.gen_forward(batch)?;
        if !breakdown.total.is_finite() {
            let op = self.diagnose_nan("total loss", || self.gen_forward(batch).map(|_| ()));
            return Err(TrainError::NonFinite { step: self.step, op });
        }
        let grads = backward(&total)?;
        adam_step(&self.model.gen_params, &grads, &mut self.adam_gen, lr as f32)?;
        Ok(breakdown)
    }

    /// Detached fake and real passes feed the discriminators; only
    /// discriminator parameters move.
    fn disc_forward(
        &self,
        batch: &Batch,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>, DiscLosses), TensorError> {
        let (fake_enc, fake_dec, real_enc, real_dec) = no_grad(|| {
            let fake = self.model.forward_pair(&batch.low, batch.s.as_ref())?;
            let fake_img = fake.image.clamp_st(0.0, 1.0)?;
            let real = self.model.forward_pair(&batch.high, batch.p.as_ref())?;
            let real_img = real.image.clamp_st(0.0, 1.0)?;
            Ok::<_, TensorError>((
                (self.disc_input(&fake_img, fake.structure.as_ref())?, fake),
                (self.disc_input(&real_img, real.structure.as_ref())?, real),
            ))
        })
        .map(|((fi, fo), (ri, ro))| (fi, fo, ri, ro))
        .and_then(|(fi, fo, ri, ro)| {
            // Re-enter recording mode: the discriminator parameters are
            // the leaves we differentiate now.
            let (fe, fd) = self.disc_logits(&fi, &fo)?;
            let (re, rd) = self.disc_logits(&ri, &ro)?;
            Ok((fe, fd, re, rd))
        })?;

        let l_enc = loss_adv_disc(&real_enc, &fake_enc)?;
        let mut losses = DiscLosses {
            enc: l_enc.item()?.as_f64(),
            dec: 0.0,
        };
        let l_dec = match (real_dec, fake_dec) {
            (Some(r), Some(f)) => {
                let l = loss_adv_disc(&r, &f)?;
                losses.dec = l.item()?.as_f64();
                Some(l)
            }
            _ => None,
        };
        Ok((l_enc, l_dec, losses))
    }

    pub fn discriminator_step(&mut self, batch: &Batch, lr: f64) -> Result<DiscLosses, TrainError> {
        let (l_enc, l_dec, losses) = self.disc_forward(batch)?;
        if !(losses.enc.is_finite() && losses.dec.is_finite()) {
            let op = self.diagnose_nan("adversarial loss", || {
                self.disc_forward(batch).map(|_| ())
            });
            return Err(TrainError::NonFinite { step: self.step, op });
        }
        match self.model.cfg.discriminators {
            DiscMode::Dual => {
                let grads_e = backward(&l_enc)?;
                adam_step(&self.model.de_params, &grads_e, &mut self.adam_de, lr as f32)?;
                let l_dec = l_dec.expect("dual mode has a decoder loss");
                let grads_d = backward(&l_dec)?;
                adam_step(&self.model.dd_params, &grads_d, &mut self.adam_dd, lr as f32)?;
            }
            DiscMode::Single => {
                // Both routes share one parameter set.
                let combined = match l_dec {
                    Some(l) => l_enc.add(&l)?,
                    None => l_enc,
                };
                let grads = backward(&combined)?;
                adam_step(&self.model.de_params, &grads, &mut self.adam_de, lr as f32)?;
            }
            DiscMode::Off => {}
        }
        Ok(losses)
    }

    /// One outer step on the configured schedule, sampling its batches
    /// from deterministic per-step streams.
    pub fn train_step(&mut self, ds: &PairedDataset) -> Result<StepReport, TrainError> {
        let lr = self.lr_for_step(self.step, ds.len());
        let prior = self.cfg.model.structure_prior;
        let (seed, crop, batch_size) = (self.cfg.seed, self.cfg.crop, self.cfg.batch);
        let gen_batch = move |tag: u64, step: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, tag));
            ds.sample_batch(crop, batch_size, prior, &mut rng)
        };
        let step = self.step;
        let mut report = StepReport {
            step,
            lr,
            gen: None,
            disc: None,
        };
        match self.cfg.ratio_mode {
            RatioMode::DiscOncePerR => {
                let batch = gen_batch(TAG_GEN_BATCH, step)?;
                report.gen = Some(self.generator_step(&batch, lr)?);
                self.steps_since_disc += 1;
                if self.adversarial_active() && self.steps_since_disc >= self.cfg.r {
                    let batch = gen_batch(TAG_DISC_BATCH, step)?;
                    report.disc = Some(self.discriminator_step(&batch, lr)?);
                    self.steps_since_disc = 0;
                }
            }
            RatioMode::GenOncePerR => {
                if self.adversarial_active() {
                    let batch = gen_batch(TAG_DISC_BATCH, step)?;
                    report.disc = Some(self.discriminator_step(&batch, lr)?);
                }
                self.steps_since_disc += 1;
                if self.steps_since_disc >= self.cfg.r || !self.adversarial_active() {
                    let batch = gen_batch(TAG_GEN_BATCH, step)?;
                    report.gen = Some(self.generator_step(&batch, lr)?);
                    self.steps_since_disc = 0;
                }
            }
        }
        self.step += 1;
        Ok(report)
    }

    // ── checkpointing ────────────────────────────────────────────────

    fn collect_store(store: &ParameterStore<f32>, out: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>) {
        for (name, p) in store.iter() {
            let t = p.get();
            out.insert(name.clone(), (t.shape().to_vec(), t.to_vec()));
        }
    }

    fn collect_moments(
        state: &AdamState,
        opt: &str,
        out: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) {
        for (name, (m, v)) in state.moments() {
            out.insert(format!("adam.{opt}.{name}.m"), (vec![m.len()], m.clone()));
            out.insert(format!("adam.{opt}.{name}.v"), (vec![v.len()], v.clone()));
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        Self::collect_store(&self.model.gen_params, &mut tensors);
        Self::collect_store(&self.model.de_params, &mut tensors);
        Self::collect_store(&self.model.dd_params, &mut tensors);
        Self::collect_moments(&self.adam_gen, "gen", &mut tensors);
        Self::collect_moments(&self.adam_de, "de", &mut tensors);
        Self::collect_moments(&self.adam_dd, "dd", &mut tensors);
        Checkpoint {
            meta: CheckpointMeta {
                config: self.cfg.clone(),
                step: self.step,
                steps_since_disc: self.steps_since_disc,
                adam_t: [self.adam_gen.t, self.adam_de.t, self.adam_dd.t],
            },
            tensors,
        }
    }

    fn apply_store(
        store: &ParameterStore<f32>,
        ckpt: &Checkpoint,
    ) -> Result<(), CheckpointError> {
        for (name, p) in store.iter() {
            let (shape, data) = ckpt.tensors.get(name).ok_or_else(|| {
                CheckpointError::ConfigMismatch(format!("missing parameter {name}"))
            })?;
            if *shape != p.shape() {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                    p.shape()
                )));
            }
            p.set(
                Tensor::param(shape, data.clone())
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            );
        }
        Ok(())
    }

    fn restore_moments(
        store: &ParameterStore<f32>,
        ckpt: &Checkpoint,
        opt: &str,
        t: u64,
    ) -> Result<AdamState, CheckpointError> {
        let mut moments = BTreeMap::new();
        for (name, p) in store.iter() {
            let m_key = format!("adam.{opt}.{name}.m");
            let v_key = format!("adam.{opt}.{name}.v");
            match (ckpt.tensors.get(&m_key), ckpt.tensors.get(&v_key)) {
                (Some((_, m)), Some((_, v))) => {
                    if m.len() != p.elem_count() || v.len() != p.elem_count() {
                        return Err(CheckpointError::ConfigMismatch(format!(
                            "moment size mismatch for {name}"
                        )));
                    }
                    moments.insert(name.clone(), (m.clone(), v.clone()));
                }
                (None, None) => {} // never stepped
                _ => {
                    return Err(CheckpointError::Corrupt(format!(
                        "half-present moments for {name}"
                    )))
                }
            }
        }
        Ok(AdamState::restore(t, moments))
    }

    /// Rebuild a trainer exactly as saved. With `expected` given, the
    /// checkpoint's model config must match it.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        expected: Option<&ModelConfig>,
    ) -> Result<Self, TrainError> {
        if let Some(want) = expected {
            if *want != ckpt.meta.config.model {
                return Err(CheckpointError::ConfigMismatch(
                    "checkpoint was written by a different model configuration".into(),
                )
                .into());
            }
        }
        let cfg = ckpt.meta.config.clone();
        let mut trainer = Trainer::new(cfg)?;
        Self::apply_store(&trainer.model.gen_params, ckpt)?;
        Self::apply_store(&trainer.model.de_params, ckpt)?;
        Self::apply_store(&trainer.model.dd_params, ckpt)?;
        trainer.adam_gen =
            Self::restore_moments(&trainer.model.gen_params, ckpt, "gen", ckpt.meta.adam_t[0])?;
        trainer.adam_de =
            Self::restore_moments(&trainer.model.de_params, ckpt, "de", ckpt.meta.adam_t[1])?;
        trainer.adam_dd =
            Self::restore_moments(&trainer.model.dd_params, ckpt, "dd", ckpt.meta.adam_t[2])?;
        trainer.step = ckpt.meta.step;
        trainer.steps_since_disc = ckpt.meta.steps_since_disc;
        Ok(trainer)
    }
}

pub struct TrainSummary {
    pub steps: u64,
    pub last_gen: LossBreakdown,
}

/// Drive a trainer to `max_steps` (or `epochs`), appending one CSV row
/// per step to `metrics.csv` and checkpointing on the configured cadence
/// when `out_dir` is given. Resumes cleanly from a loaded trainer.
pub fn run_training(
    trainer: &mut Trainer,
    ds: &PairedDataset,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainSummary, TrainError> {
    let total_steps = trainer
        .cfg
        .max_steps
        .unwrap_or(trainer.cfg.epochs * trainer.steps_per_epoch(ds.len()));
    let io_err = |path: &Path, source: std::io::Error| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut csv = match out_dir {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            if fresh {
                writeln!(f, "step,lr,loss_image,loss_structure,adv_enc,adv_dec,total")
                    .map_err(|e| io_err(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut last_gen = LossBreakdown::default();
    while trainer.step < total_steps {
        let report = trainer.train_step(ds)?;
        if let Some(g) = &report.gen {
            last_gen = *g;
        }
        if let Some((f, path)) = &mut csv {
            let g = report.gen.unwrap_or(last_gen);
            let d = report.disc.unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                report.step, report.lr, g.image, g.structure, d.enc, d.dec, g.total
            )
            .map_err(|e| io_err(path, e))?;
        }
        if let Some(dir) = out_dir {
            if trainer.cfg.checkpoint_every > 0 && trainer.step % trainer.cfg.checkpoint_every == 0
            {
                let path = dir.join(format!("step_{}.ckpt", trainer.step));
                trainer.to_checkpoint().save(&path)?;
            }
        }
        on_step(&report);
    }
    if let Some(dir) = out_dir {
        trainer.to_checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainSummary {
        steps: trainer.step,
        last_gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio;
    use crate::model::{SkipMode, SpgmVariant, StructurePrior};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            crop: 32,
            batch: 1,
            r: 2,
            seed: 11,
            max_steps: Some(6),
            checkpoint_every: 0,
            model: ModelConfig {
                c: 8,
                gen_depths: [1, 1, 1, 1],
                spe_depths: [1, 1, 1, 1],
                windows: vec![2, 4],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> PairedDataset {
        std::fs::create_dir_all(dir.join("low")).unwrap();
        std::fs::create_dir_all(dir.join("high")).unwrap();
        for i in 0..2 {
            let n = 32 * 32 * 3;
            let high: Vec<f32> = (0..n)
                .map(|v| 0.3 + 0.5 * ((v + i * 37) as f32 * 0.11).sin().abs())
                .collect();
            let low: Vec<f32> = high.iter().map(|v| v * 0.25).collect();
            let shape = [1usize, 32, 32, 3];
            imageio::save_png(
                &dir.join("low").join(format!("p{i}.png")),
                &Tensor::from_vec(&shape, low).unwrap(),
            )
            .unwrap();
            imageio::save_png(
                &dir.join("high").join(format!("p{i}.png")),
                &Tensor::from_vec(&shape, high).unwrap(),
            )
            .unwrap();
        }
        PairedDataset::load(dir, 32).unwrap()
    }

    fn snapshot(store: &ParameterStore<f32>) -> Vec<(String, Vec<u32>)> {
        store
            .iter()
            .map(|(n, p)| (n.clone(), p.get().data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn schedule_updates_discs_once_per_r() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        let mut disc_steps = Vec::new();
        for _ in 0..6 {
            let report = trainer.train_step(&ds).unwrap();
            assert!(report.gen.is_some());
            if report.disc.is_some() {
                disc_steps.push(report.step);
            }
        }
        // r = 2: discriminators move after generator steps 2, 4, 6.
        assert_eq!(disc_steps, vec![1, 3, 5]);
    }

    #[test]
    fn freeze_discipline_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut cfg = tiny_cfg();
        cfg.r = 1; // disc update every step
        let mut trainer = Trainer::new(cfg).unwrap();
        let lr = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = ds
            .sample_batch(32, 1, StructurePrior::Gradient, &mut rng)
            .unwrap();

        let de_before = snapshot(&trainer.model.de_params);
        let dd_before = snapshot(&trainer.model.dd_params);
        trainer.generator_step(&batch, lr).unwrap();
        assert_eq!(snapshot(&trainer.model.de_params), de_before);
        assert_eq!(snapshot(&trainer.model.dd_params), dd_before);

        let gen_before = snapshot(&trainer.model.gen_params);
        trainer.discriminator_step(&batch, lr).unwrap();
        assert_eq!(snapshot(&trainer.model.gen_params), gen_before);
        // And the discriminators actually moved.
        assert_ne!(snapshot(&trainer.model.de_params), de_before);
    }

    #[test]
    fn beta_zero_skips_discriminators_entirely() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut cfg = tiny_cfg();
        cfg.weights.beta = 0.0;
        let mut trainer = Trainer::new(cfg).unwrap();
        let de_before = snapshot(&trainer.model.de_params);
        for _ in 0..4 {
            let report = trainer.train_step(&ds).unwrap();
            assert!(report.disc.is_none());
            let g = report.gen.unwrap();
            assert!(g.total.is_finite());
            assert_eq!(g.adv_enc, 0.0);
        }
        assert_eq!(snapshot(&trainer.model.de_params), de_before);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let run = || {
            let mut trainer = Trainer::new(tiny_cfg()).unwrap();
            for _ in 0..4 {
                trainer.train_step(&ds).unwrap();
            }
            (
                snapshot(&trainer.model.gen_params),
                snapshot(&trainer.model.de_params),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());

        let mut straight = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..3 {
            straight.train_step(&ds).unwrap();
        }
        let expected = straight.train_step(&ds).unwrap();

        let mut first = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..3 {
            first.train_step(&ds).unwrap();
        }
        let bytes = first.to_checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt, None).unwrap();
        let got = resumed.train_step(&ds).unwrap();

        let (e, g) = (expected.gen.unwrap(), got.gen.unwrap());
        assert!((e.total - g.total).abs() <= 1e-6, "{} vs {}", e.total, g.total);
        assert_eq!(
            snapshot(&straight.model.gen_params),
            snapshot(&resumed.model.gen_params)
        );
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        trainer.train_step(&ds).unwrap();
        let bytes = trainer.to_checkpoint().to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let resumed = Trainer::from_checkpoint(&loaded, None).unwrap();
        assert_eq!(resumed.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn mismatched_config_refused() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut trainer = Trainer::new(tiny_cfg()).unwrap();
        trainer.train_step(&ds).unwrap();
        let ckpt = trainer.to_checkpoint();
        let other = ModelConfig {
            c: 16,
            ..tiny_cfg().model
        };
        match Trainer::from_checkpoint(&ckpt, Some(&other)) {
            Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(_))) => {}
            Err(e) => panic!("wrong error kind: {e}"),
            Ok(_) => panic!("mismatched config was accepted"),
        }
    }

    #[test]
    fn inverse_ratio_mode_swaps_roles() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut cfg = tiny_cfg();
        cfg.ratio_mode = RatioMode::GenOncePerR;
        cfg.model.enc_dec_skip = SkipMode::Sum;
        cfg.model.spgm = SpgmVariant::MultiplyAdd;
        let mut trainer = Trainer::new(cfg).unwrap();
        let mut gen_steps = Vec::new();
        for _ in 0..4 {
            let report = trainer.train_step(&ds).unwrap();
            assert!(report.disc.is_some());
            if report.gen.is_some() {
                gen_steps.push(report.step);
            }
        }
        assert_eq!(gen_steps, vec![1, 3]);
    }
}
