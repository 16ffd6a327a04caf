//! Structurally guided discriminator: patch embed over the
//! image+structure stack, four stages of (fuse, transformer block)
//! with merges between, and a linear head producing a logits map.
//! One instance judges encoder features, the other decoder features;
//! both consume the same shaped inputs.

use rand::Rng;

use super::spgm::disc_fuse;
use super::unet::STAGES;
use super::ModelConfig;
use crate::nn::{Linear, ParameterStore};
use crate::pwstb::PwStb;
use crate::tensor::{Result, Scalar, Tensor, TensorError};
use crate::windowing::{PatchEmbed, PatchMerge, TokenGrid};

pub struct Discriminator<F: Scalar> {
    patch_embed: PatchEmbed<F>,
    stages: Vec<Vec<PwStb<F>>>,
    /// Skip reductions `Linear(2C_i -> C_i)` per stage, present when the
    /// generator-discriminator skip is on.
    fuse: Vec<Option<Linear<F>>>,
    merges: Vec<PatchMerge<F>>,
    head: Linear<F>,
    gd_skip: bool,
    prior_gate: bool,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.c;
        let patch_embed = PatchEmbed::new(cfg.disc_in_channels(), c, rng);
        let mut stages = Vec::with_capacity(STAGES);
        let mut fuse = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            let dim = c << i;
            fuse.push(if cfg.gd_skip {
                Some(Linear::new(2 * dim, dim, rng))
            } else {
                None
            });
            let mut blocks = Vec::with_capacity(cfg.disc_depth);
            for _ in 0..cfg.disc_depth {
                blocks.push(PwStb::new(dim, cfg.heads, &cfg.windows, cfg.rel_pos_bias, rng)?);
            }
            stages.push(blocks);
            if i + 1 < STAGES {
                merges.push(PatchMerge::new(dim, rng));
            }
        }
        Ok(Discriminator {
            patch_embed,
            stages,
            fuse,
            merges,
            head: Linear::new(c << (STAGES - 1), 1, rng),
            gd_skip: cfg.gd_skip,
            prior_gate: cfg.disc_prior,
        })
    }

    /// `img` is the (image ⊕ structure) stack; `gen_feats` and
    /// `spe_feats` are stage features ordered shallow to deep, matching
    /// this net's stage resolutions. Returns a `(B, H/16, W/16, 1)`
    /// logits map.
    pub fn forward(
        &self,
        img: &Tensor<F>,
        gen_feats: Option<&[Tensor<F>]>,
        spe_feats: Option<&[Tensor<F>]>,
    ) -> Result<Tensor<F>> {
        if self.gd_skip && gen_feats.is_none() {
            return Err(TensorError::InvalidArgument {
                op: "discriminator",
                msg: "generator skip is on but no generator features were given".into(),
            });
        }
        if self.prior_gate && spe_feats.is_none() {
            return Err(TensorError::InvalidArgument {
                op: "discriminator",
                msg: "prior gating is on but no SPE features were given".into(),
            });
        }
        if let Some(f) = gen_feats {
            if f.len() != STAGES {
                return Err(TensorError::InvalidArgument {
                    op: "discriminator",
                    msg: format!("expected {STAGES} generator features, got {}", f.len()),
                });
            }
        }
        if let Some(f) = spe_feats {
            if f.len() != STAGES {
                return Err(TensorError::InvalidArgument {
                    op: "discriminator",
                    msg: format!("expected {STAGES} SPE features, got {}", f.len()),
                });
            }
        }
        let mut grid = self.patch_embed.forward(img)?;
        for i in 0..STAGES {
            let f_g = gen_feats.filter(|_| self.gd_skip).map(|f| &f[i]);
            let f_p = spe_feats.filter(|_| self.prior_gate).map(|f| &f[i]);
            let fused = disc_fuse(&grid.tensor, f_g, f_p, self.fuse[i].as_ref())?;
            grid = TokenGrid::new(fused, grid.stage_scale);
            for block in &self.stages[i] {
                grid = block.forward(&grid)?;
            }
            if i + 1 < STAGES {
                grid = self.merges[i].forward(&grid)?;
            }
        }
        self.head.forward(&grid.tensor)
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.patch_embed.register(&format!("{prefix}.embed"), store);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(lin) = &self.fuse[i] {
                lin.register(&format!("{prefix}.fuse{i}"), store);
            }
            for (b, block) in stage.iter().enumerate() {
                block.register(&format!("{prefix}.s{i}.b{b}"), store);
            }
        }
        for (i, m) in self.merges.iter().enumerate() {
            m.register(&format!("{prefix}.merge{i}"), store);
        }
        self.head.register(&format!("{prefix}.head"), store);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{extract_structure, ModelConfig, SpgatModel, StructurePrior};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            c: 8,
            gen_depths: [1, 1, 1, 1],
            spe_depths: [1, 1, 1, 1],
            windows: vec![2, 4],
            ..Default::default()
        }
    }

    fn random_img(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn logits_shape_after_four_halvings() {
        let cfg = tiny_cfg();
        let model = SpgatModel::<f32>::new(&cfg, 1).unwrap();
        let low = random_img(&[1, 64, 64, 3], 2);
        let s = extract_structure(&low, StructurePrior::Gradient).unwrap();
        let out = model.forward_pair(&low, Some(&s)).unwrap();
        let img6 = Tensor::concat(
            &[out.image.clone(), out.structure.clone().unwrap()],
            3,
        )
        .unwrap();
        let spe = out.spe_feats.as_ref().unwrap();
        let logits = model
            .disc_e
            .as_ref()
            .unwrap()
            .forward(&img6, Some(&out.gen_feats.enc), Some(&spe.enc))
            .unwrap();
        assert_eq!(logits.shape(), &[1, 4, 4, 1]);

        // Decoder-feature pass, resolution matched.
        let logits_d = model
            .disc_d
            .as_ref()
            .unwrap()
            .forward(
                &img6,
                Some(&out.gen_feats.dec_by_resolution()),
                Some(&spe.dec_by_resolution()),
            )
            .unwrap();
        assert_eq!(logits_d.shape(), &[1, 4, 4, 1]);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let disc = Discriminator::<f32>::new(&cfg, &mut rng).unwrap();
        let mut store = ParameterStore::new();
        disc.register("d", &mut store);
        for (_, p) in store.iter() {
            let shape = p.shape();
            let n: usize = shape.iter().product();
            p.set(Tensor::param(&shape, vec![0.0; n]).unwrap());
        }
        let img = random_img(&[1, 32, 32, 6], 4);
        let feats: Vec<Tensor<f32>> = (0..4)
            .map(|i| random_img(&[1, 16 >> i, 16 >> i, 8 << i], 10 + i as u64))
            .collect();
        let logits = disc.forward(&img, Some(&feats), Some(&feats)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_features_rejected_when_skip_on() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disc = Discriminator::<f32>::new(&cfg, &mut rng).unwrap();
        let img = random_img(&[1, 32, 32, 6], 6);
        assert!(disc.forward(&img, None, None).is_err());
    }
}
