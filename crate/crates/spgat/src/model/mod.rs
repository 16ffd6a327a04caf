//! Network assembly: configuration and ablation switches, the
//! generator / structure-estimator pair, and the two feature-guided
//! discriminators.

mod discriminator;
mod spgm;
mod structure;
mod unet;

pub use discriminator::Discriminator;
pub use spgm::{disc_fuse, spgm_apply};
pub use structure::extract_structure;
pub use unet::{UNet, UNetFeatures};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::ParameterStore;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpgmVariant {
    /// `f_p * f_e + f_e`; adds no parameters.
    MultiplyAdd,
    /// `Linear(concat[f_p, f_e])` back to the original width.
    ConcatLinear,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Concat,
    Sum,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    Dual,
    Single,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructurePrior {
    Gradient,
    Highpass,
    Image,
    Off,
}

/// Architecture plus every ablation switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel base; stages run at C, 2C, 4C, 8C.
    pub c: usize,
    pub gen_depths: [usize; 4],
    pub spe_depths: [usize; 4],
    pub disc_depth: usize,
    pub heads: usize,
    pub windows: Vec<usize>,
    pub spgm: SpgmVariant,
    pub enc_dec_skip: SkipMode,
    pub discriminators: DiscMode,
    /// Skip connections from the generator into the discriminators.
    pub gd_skip: bool,
    /// Structure-feature gating inside the discriminators.
    pub disc_prior: bool,
    pub structure_prior: StructurePrior,
    pub rel_pos_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 32,
            gen_depths: [4, 4, 4, 2],
            spe_depths: [2, 2, 2, 2],
            disc_depth: 1,
            heads: 4,
            windows: vec![2, 4, 8],
            spgm: SpgmVariant::MultiplyAdd,
            enc_dec_skip: SkipMode::Concat,
            discriminators: DiscMode::Dual,
            gd_skip: true,
            disc_prior: true,
            structure_prior: StructurePrior::Gradient,
            rel_pos_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| TensorError::InvalidArgument {
            op: "model_config",
            msg,
        };
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return Err(bad(format!(
                "channel base {} must be a positive multiple of heads {}",
                self.c, self.heads
            )));
        }
        if self.windows.is_empty() || self.windows.iter().any(|&k| k == 0) {
            return Err(bad("window list must be non-empty and positive".into()));
        }
        if self.gen_depths.iter().any(|&d| d == 0)
            || self.spe_depths.iter().any(|&d| d == 0)
            || self.disc_depth == 0
        {
            return Err(bad("stage depths must be positive".into()));
        }
        if self.structure_prior == StructurePrior::Off {
            if self.spgm != SpgmVariant::Off {
                return Err(bad(
                    "structure guidance needs a structure prior (set spgm = off)".into(),
                ));
            }
            if self.disc_prior {
                return Err(bad(
                    "discriminator prior gating needs a structure prior".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn has_spe(&self) -> bool {
        self.structure_prior != StructurePrior::Off
    }

    /// Image channels the discriminators see: RGB plus the 3-channel
    /// structure map when a prior is in play.
    pub fn disc_in_channels(&self) -> usize {
        if self.has_spe() {
            6
        } else {
            3
        }
    }
}

/// One full fake- or real-pass through SPE and generator.
pub struct ModelOutput<F: Scalar> {
    /// Raw enhanced image, unclamped.
    pub image: Tensor<F>,
    /// Estimated structure, when an SPE exists.
    pub structure: Option<Tensor<F>>,
    pub gen_feats: UNetFeatures<F>,
    pub spe_feats: Option<UNetFeatures<F>>,
}

/// The four networks plus their parameter stores, split by optimizer:
/// generator and SPE train together, each discriminator alone.
pub struct SpgatModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub generator: UNet<F>,
    pub spe: Option<UNet<F>>,
    pub disc_e: Option<Discriminator<F>>,
    pub disc_d: Option<Discriminator<F>>,
    pub gen_params: ParameterStore<F>,
    pub de_params: ParameterStore<F>,
    pub dd_params: ParameterStore<F>,
}

impl<F: Scalar> SpgatModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = UNet::new(cfg, &cfg.gen_depths, 3, 3, true, &mut rng)?;
        let spe = if cfg.has_spe() {
            Some(UNet::new(cfg, &cfg.spe_depths, 3, 3, false, &mut rng)?)
        } else {
            None
        };
        let disc_e = match cfg.discriminators {
            DiscMode::Off => None,
            _ => Some(Discriminator::new(cfg, &mut rng)?),
        };
        let disc_d = match cfg.discriminators {
            DiscMode::Dual => Some(Discriminator::new(cfg, &mut rng)?),
            _ => None,
        };

        let mut gen_params = ParameterStore::new();
        generator.register("gen", &mut gen_params);
        if let Some(spe) = &spe {
            spe.register("spe", &mut gen_params);
        }
        let mut de_params = ParameterStore::new();
        if let Some(d) = &disc_e {
            d.register("de", &mut de_params);
        }
        let mut dd_params = ParameterStore::new();
        if let Some(d) = &disc_d {
            d.register("dd", &mut dd_params);
        }

        Ok(SpgatModel {
            cfg: cfg.clone(),
            generator,
            spe,
            disc_e,
            disc_d,
            gen_params,
            de_params,
            dd_params,
        })
    }

    /// Run SPE on the structure map, then the generator guided by the
    /// SPE stage features. `img` and `structure` must already be padded
    /// to a multiple of 4 (one patch-embed halving plus even merges).
    pub fn forward_pair(&self, img: &Tensor<F>, structure: Option<&Tensor<F>>) -> Result<ModelOutput<F>> {
        let (spe_out, spe_feats) = match (&self.spe, structure) {
            (Some(spe), Some(s)) => {
                let (p_hat, feats) = spe.forward(s, None)?;
                (Some(p_hat), Some(feats))
            }
            (None, _) => (None, None),
            (Some(_), None) => {
                return Err(TensorError::InvalidArgument {
                    op: "forward_pair",
                    msg: "model has an SPE but no structure map was given".into(),
                })
            }
        };
        let guide = if self.cfg.spgm != SpgmVariant::Off {
            spe_feats.as_ref()
        } else {
            None
        };
        let (image, gen_feats) = self.generator.forward(img, guide)?;
        Ok(ModelOutput {
            image,
            structure: spe_out,
            gen_feats,
            spe_feats,
        })
    }

    pub fn total_param_count(&self) -> usize {
        self.gen_params.param_count() + self.de_params.param_count() + self.dd_params.param_count()
    }
}

pub fn param_count<F: Scalar>(store: &ParameterStore<F>) -> usize {
    store.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            c: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_guidance_without_prior() {
        let cfg = ModelConfig {
            structure_prior: StructurePrior::Off,
            disc_prior: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err()); // spgm still multiply_add
        let ok = ModelConfig {
            structure_prior: StructurePrior::Off,
            spgm: SpgmVariant::Off,
            disc_prior: false,
            ..Default::default()
        };
        ok.validate().unwrap();
        assert_eq!(ok.disc_in_channels(), 3);
    }

    #[test]
    fn spgm_variant_parameter_counts() {
        let small = ModelConfig {
            c: 8,
            gen_depths: [1, 1, 1, 1],
            spe_depths: [1, 1, 1, 1],
            discriminators: DiscMode::Off,
            gd_skip: false,
            disc_prior: false,
            windows: vec![2],
            ..Default::default()
        };
        let multiply = SpgatModel::<f32>::new(&small, 3).unwrap();
        let off = SpgatModel::<f32>::new(
            &ModelConfig {
                spgm: SpgmVariant::Off,
                ..small.clone()
            },
            3,
        )
        .unwrap();
        let concat = SpgatModel::<f32>::new(
            &ModelConfig {
                spgm: SpgmVariant::ConcatLinear,
                ..small.clone()
            },
            3,
        )
        .unwrap();
        // Elementwise gating is parameter-free; the concat variant pays
        // 2C*C + C per site.
        assert_eq!(
            multiply.gen_params.param_count(),
            off.gen_params.param_count()
        );
        let per_site: usize = (0..4)
            .map(|i| {
                let w = 8usize << i;
                2 * w * w + w
            })
            .sum::<usize>()
            * 2; // encoder and decoder sites
        assert_eq!(
            concat.gen_params.param_count(),
            multiply.gen_params.param_count() + per_site
        );
    }
}
