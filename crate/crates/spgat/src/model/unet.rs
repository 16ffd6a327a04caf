//! The U-shaped transformer both the generator and the SPE share:
//! patch embed, four encoder stages with merges between, a mirrored
//! decoder with combines and encoder skips, patch unembed. Stage
//! outputs are recorded for the discriminator skips; when guide
//! features are supplied, each stage output is gated by the matching
//! SPE feature.

use rand::Rng;

use super::spgm::spgm_apply;
use super::{ModelConfig, SkipMode, SpgmVariant};
use crate::nn::{Linear, ParameterStore};
use crate::pwstb::PwStb;
use crate::tensor::{Result, Scalar, Tensor, TensorError};
use crate::windowing::{PatchCombine, PatchEmbed, PatchMerge, PatchUnembed, TokenGrid};

pub const STAGES: usize = 4;

/// Per-stage feature tensors from one forward pass. `enc[i]` runs
/// shallow to deep; `dec[j]` is in execution order, deepest first, so
/// `enc[i]` and `dec[STAGES - 1 - i]` share a resolution.
pub struct UNetFeatures<F: Scalar> {
    pub enc: Vec<Tensor<F>>,
    pub dec: Vec<Tensor<F>>,
}

impl<F: Scalar> UNetFeatures<F> {
    /// Decoder features reordered shallow to deep, matching `enc`.
    pub fn dec_by_resolution(&self) -> Vec<Tensor<F>> {
        self.dec.iter().rev().cloned().collect()
    }

    pub fn detach(&self) -> UNetFeatures<F> {
        UNetFeatures {
            enc: self.enc.iter().map(Tensor::detach).collect(),
            dec: self.dec.iter().map(Tensor::detach).collect(),
        }
    }
}

pub struct UNet<F: Scalar> {
    patch_embed: PatchEmbed<F>,
    enc_stages: Vec<Vec<PwStb<F>>>,
    merges: Vec<PatchMerge<F>>,
    /// Execution order: `dec_stages[0]` is the deepest.
    dec_stages: Vec<Vec<PwStb<F>>>,
    combines: Vec<PatchCombine<F>>,
    skip_mode: SkipMode,
    /// Concat-skip reductions at the three upsample joins.
    skip_fuse: Vec<Option<Linear<F>>>,
    spgm: SpgmVariant,
    spgm_enc: Vec<Option<Linear<F>>>,
    spgm_dec: Vec<Option<Linear<F>>>,
    patch_unembed: PatchUnembed<F>,
}

impl<F: Scalar> UNet<F> {
    /// `guided` controls whether SPGM sites exist (the generator is
    /// guided, the SPE itself is not).
    pub fn new(
        cfg: &ModelConfig,
        depths: &[usize; STAGES],
        in_channels: usize,
        out_channels: usize,
        guided: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.c;
        let patch_embed = PatchEmbed::new(in_channels, c, rng);
        let mut enc_stages = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for (i, &depth) in depths.iter().enumerate() {
            let dim = c << i;
            let mut blocks = Vec::with_capacity(depth);
            for _ in 0..depth {
                blocks.push(PwStb::new(dim, cfg.heads, &cfg.windows, cfg.rel_pos_bias, rng)?);
            }
            enc_stages.push(blocks);
            if i + 1 < STAGES {
                merges.push(PatchMerge::new(dim, rng));
            }
        }
        // Decoder mirrors the encoder depths, deepest stage first.
        let mut dec_stages = Vec::with_capacity(STAGES);
        let mut combines = Vec::with_capacity(STAGES - 1);
        let mut skip_fuse = Vec::with_capacity(STAGES - 1);
        for j in 0..STAGES {
            let enc_idx = STAGES - 1 - j;
            let dim = c << enc_idx;
            if j > 0 {
                combines.push(PatchCombine::new(dim * 2, rng));
                skip_fuse.push(match cfg.enc_dec_skip {
                    SkipMode::Concat => Some(Linear::new(2 * dim, dim, rng)),
                    _ => None,
                });
            }
            let mut blocks = Vec::with_capacity(depths[enc_idx]);
            for _ in 0..depths[enc_idx] {
                blocks.push(PwStb::new(dim, cfg.heads, &cfg.windows, cfg.rel_pos_bias, rng)?);
            }
            dec_stages.push(blocks);
        }

        let spgm = if guided { cfg.spgm } else { SpgmVariant::Off };
        let mut spgm_enc = Vec::with_capacity(STAGES);
        let mut spgm_dec = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let dim = c << i;
            spgm_enc.push(match spgm {
                SpgmVariant::ConcatLinear => Some(Linear::new(2 * dim, dim, rng)),
                _ => None,
            });
        }
        for j in 0..STAGES {
            let dim = c << (STAGES - 1 - j);
            spgm_dec.push(match spgm {
                SpgmVariant::ConcatLinear => Some(Linear::new(2 * dim, dim, rng)),
                _ => None,
            });
        }

        Ok(UNet {
            patch_embed,
            enc_stages,
            merges,
            dec_stages,
            combines,
            skip_mode: cfg.enc_dec_skip,
            skip_fuse,
            spgm,
            spgm_enc,
            spgm_dec,
            patch_unembed: PatchUnembed::new(c, out_channels, rng),
        })
    }

    fn check_guide(&self, guide: Option<&UNetFeatures<F>>) -> Result<()> {
        if self.spgm != SpgmVariant::Off && guide.is_none() {
            return Err(TensorError::InvalidArgument {
                op: "unet_forward",
                msg: "guided net called without guide features".into(),
            });
        }
        Ok(())
    }

    /// Full U pass. Input dims must be divisible by 16 so every stage
    /// grid stays even; callers pad beforehand.
    pub fn forward(
        &self,
        img: &Tensor<F>,
        guide: Option<&UNetFeatures<F>>,
    ) -> Result<(Tensor<F>, UNetFeatures<F>)> {
        self.check_guide(guide)?;
        if img.rank() != 4 || img.shape()[1] % 16 != 0 || img.shape()[2] % 16 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "unet_forward",
                msg: format!(
                    "input dims {:?} must be (B, 16m, 16n, C); pad the image first",
                    img.shape()
                ),
            });
        }
        let mut grid = self.patch_embed.forward(img)?;
        let mut enc_feats: Vec<Tensor<F>> = Vec::with_capacity(STAGES);
        for (i, stage) in self.enc_stages.iter().enumerate() {
            for block in stage {
                grid = block.forward(&grid)?;
            }
            if let Some(g) = guide {
                let gated = spgm_apply(
                    &grid.tensor,
                    &g.enc[i],
                    self.spgm,
                    self.spgm_enc[i].as_ref(),
                )?;
                grid = TokenGrid::new(gated, grid.stage_scale);
            }
            enc_feats.push(grid.tensor.clone());
            if i + 1 < STAGES {
                grid = self.merges[i].forward(&grid)?;
            }
        }

        let mut dec_feats: Vec<Tensor<F>> = Vec::with_capacity(STAGES);
        for (j, stage) in self.dec_stages.iter().enumerate() {
            if j > 0 {
                grid = self.combines[j - 1].forward(&grid)?;
                let enc = &enc_feats[STAGES - 1 - j];
                let joined = match self.skip_mode {
                    SkipMode::Concat => {
                        let lin = self.skip_fuse[j - 1].as_ref().expect("concat skip layer");
                        let cat = Tensor::concat(&[grid.tensor.clone(), enc.clone()], 3)?;
                        lin.forward(&cat)?
                    }
                    SkipMode::Sum => grid.tensor.add(enc)?,
                    SkipMode::Off => grid.tensor.clone(),
                };
                grid = TokenGrid::new(joined, grid.stage_scale);
            }
            for block in stage {
                grid = block.forward(&grid)?;
            }
            if let Some(g) = guide {
                let gated = spgm_apply(
                    &grid.tensor,
                    &g.dec[j],
                    self.spgm,
                    self.spgm_dec[j].as_ref(),
                )?;
                grid = TokenGrid::new(gated, grid.stage_scale);
            }
            dec_feats.push(grid.tensor.clone());
        }

        let out = self.patch_unembed.forward(&grid)?;
        Ok((
            out,
            UNetFeatures {
                enc: enc_feats,
                dec: dec_feats,
            },
        ))
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.patch_embed.register(&format!("{prefix}.embed"), store);
        for (i, stage) in self.enc_stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.register(&format!("{prefix}.enc{i}.b{b}"), store);
            }
        }
        for (i, m) in self.merges.iter().enumerate() {
            m.register(&format!("{prefix}.merge{i}"), store);
        }
        for (j, stage) in self.dec_stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.register(&format!("{prefix}.dec{j}.b{b}"), store);
            }
        }
        for (j, cm) in self.combines.iter().enumerate() {
            cm.register(&format!("{prefix}.combine{j}"), store);
        }
        for (j, f) in self.skip_fuse.iter().enumerate() {
            if let Some(lin) = f {
                lin.register(&format!("{prefix}.skip{j}"), store);
            }
        }
        for (i, s) in self.spgm_enc.iter().enumerate() {
            if let Some(lin) = s {
                lin.register(&format!("{prefix}.spgm_enc{i}"), store);
            }
        }
        for (j, s) in self.spgm_dec.iter().enumerate() {
            if let Some(lin) = s {
                lin.register(&format!("{prefix}.spgm_dec{j}"), store);
            }
        }
        self.patch_unembed
            .register(&format!("{prefix}.unembed"), store);
    }
}
