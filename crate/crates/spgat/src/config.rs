//! Flat key-value config files and the named ablation presets.
//!
//! The format is one `key = value` pair per line, `#` comments, no
//! sections. Values are integers, floats, booleans, bare identifiers
//! (enum values) or bracketed integer lists. Unknown keys are errors,
//! as are duplicate keys, so a config never silently drifts.

use thiserror::Error;

use crate::loss::LossWeights;
use crate::model::{DiscMode, SkipMode, SpgmVariant, StructurePrior};
use crate::train::{RatioMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: cannot parse `{text}`: {msg}")]
    Syntax {
        line: usize,
        text: String,
        msg: String,
    },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("unknown ablation `{0}`")]
    UnknownAblation(String),
    #[error("{0}")]
    Invalid(String),
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        msg: format!("`{v}` is not a non-negative integer"),
    })
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        msg: format!("`{v}` is not a non-negative integer"),
    })
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let parsed: f64 = v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        msg: format!("`{v}` is not a number"),
    })?;
    if !parsed.is_finite() {
        return Err(ConfigError::BadValue {
            key: key.into(),
            msg: "value must be finite".into(),
        });
    }
    Ok(parsed)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            msg: format!("`{v}` is not `true` or `false`"),
        }),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| ConfigError::BadValue {
            key: key.into(),
            msg: format!("`{v}` is not a bracketed list like [4, 4, 4, 2]"),
        })?;
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(parse_usize(key, part)?);
    }
    Ok(out)
}

fn parse_depths(key: &str, v: &str) -> Result<[usize; 4], ConfigError> {
    let list = parse_list(key, v)?;
    list.try_into().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        msg: "expected exactly four stage depths".into(),
    })
}

/// Apply config-file text on top of `base`.
pub fn parse_train_config(text: &str, base: TrainConfig) -> Result<TrainConfig, ConfigError> {
    let mut cfg = base;
    let mut seen = std::collections::BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: content.to_string(),
                msg: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        let v = value.trim();
        if key.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: content.to_string(),
                msg: "empty key or value".into(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.into(),
            });
        }
        match key {
            "C" => cfg.model.c = parse_usize(key, v)?,
            "heads" => cfg.model.heads = parse_usize(key, v)?,
            "gen_depths" => cfg.model.gen_depths = parse_depths(key, v)?,
            "spe_depths" => cfg.model.spe_depths = parse_depths(key, v)?,
            "disc_depth" => cfg.model.disc_depth = parse_usize(key, v)?,
            "windows" => cfg.model.windows = parse_list(key, v)?,
            "spgm" => {
                cfg.model.spgm = match v {
                    "multiply_add" => SpgmVariant::MultiplyAdd,
                    "concat_linear" => SpgmVariant::ConcatLinear,
                    "off" => SpgmVariant::Off,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!(
                                "`{v}` is not one of multiply_add, concat_linear, off"
                            ),
                        })
                    }
                }
            }
            "enc_dec_skip" => {
                cfg.model.enc_dec_skip = match v {
                    "concat" => SkipMode::Concat,
                    "sum" => SkipMode::Sum,
                    "off" => SkipMode::Off,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("`{v}` is not one of concat, sum, off"),
                        })
                    }
                }
            }
            "discriminators" => {
                cfg.model.discriminators = match v {
                    "dual" => DiscMode::Dual,
                    "single" => DiscMode::Single,
                    "off" => DiscMode::Off,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("`{v}` is not one of dual, single, off"),
                        })
                    }
                }
            }
            "gd_skip" => cfg.model.gd_skip = parse_bool(key, v)?,
            "disc_prior" => cfg.model.disc_prior = parse_bool(key, v)?,
            "structure_prior" => {
                cfg.model.structure_prior = match v {
                    "gradient" => StructurePrior::Gradient,
                    "highpass" => StructurePrior::Highpass,
                    "image" => StructurePrior::Image,
                    "off" => StructurePrior::Off,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!(
                                "`{v}` is not one of gradient, highpass, image, off"
                            ),
                        })
                    }
                }
            }
            "rel_pos_bias" => cfg.model.rel_pos_bias = parse_bool(key, v)?,
            "alpha" => cfg.weights.alpha = parse_f64(key, v)?,
            "beta" => cfg.weights.beta = parse_f64(key, v)?,
            "r" => cfg.r = parse_u64(key, v)?,
            "ratio_mode" => {
                cfg.ratio_mode = match v {
                    "disc_once_per_r" => RatioMode::DiscOncePerR,
                    "gen_once_per_r" => RatioMode::GenOncePerR,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!(
                                "`{v}` is not one of disc_once_per_r, gen_once_per_r"
                            ),
                        })
                    }
                }
            }
            "lr0" => cfg.lr0 = parse_f64(key, v)?,
            "lr_halving_epochs" => cfg.lr_halving_epochs = parse_u64(key, v)?,
            "epochs" => cfg.epochs = parse_u64(key, v)?,
            "batch" => cfg.batch = parse_usize(key, v)?,
            "crop" => cfg.crop = parse_usize(key, v)?,
            "seed" => cfg.seed = parse_u64(key, v)?,
            "max_steps" => cfg.max_steps = Some(parse_u64(key, v)?),
            "checkpoint_every" => cfg.checkpoint_every = parse_u64(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                })
            }
        }
    }
    Ok(cfg)
}

/// Named ablation presets: the basic-component grid M1..M7, the
/// discriminator grid D1..D6, structure priors, window combinations and
/// update ratios.
pub fn apply_ablation(cfg: &mut TrainConfig, name: &str) -> Result<(), ConfigError> {
    let m = &mut cfg.model;
    match name.to_ascii_lowercase().as_str() {
        // Skip connection x structure guidance x adversarial learning.
        "m1" => {
            m.enc_dec_skip = SkipMode::Off;
            m.spgm = SpgmVariant::Off;
            m.structure_prior = StructurePrior::Off;
            m.discriminators = DiscMode::Off;
            m.disc_prior = false;
        }
        "m2" => {
            m.enc_dec_skip = SkipMode::Sum;
            m.spgm = SpgmVariant::Off;
            m.structure_prior = StructurePrior::Off;
            m.discriminators = DiscMode::Off;
            m.disc_prior = false;
        }
        "m3" => {
            m.enc_dec_skip = SkipMode::Sum;
            m.spgm = SpgmVariant::MultiplyAdd;
            m.discriminators = DiscMode::Off;
        }
        "m4" => {
            m.enc_dec_skip = SkipMode::Concat;
            m.spgm = SpgmVariant::Off;
            m.structure_prior = StructurePrior::Off;
            m.discriminators = DiscMode::Off;
            m.disc_prior = false;
        }
        "m5" => {
            m.enc_dec_skip = SkipMode::Concat;
            m.spgm = SpgmVariant::ConcatLinear;
            m.discriminators = DiscMode::Off;
        }
        "m6" => {
            m.enc_dec_skip = SkipMode::Concat;
            m.spgm = SpgmVariant::MultiplyAdd;
            m.discriminators = DiscMode::Off;
        }
        "m7" => {} // the full model
        // Discriminator grid: (G-D skip, prior gating, single/dual).
        "d1" => {
            m.gd_skip = false;
            m.disc_prior = false;
            m.discriminators = DiscMode::Single;
        }
        "d2" => {
            m.gd_skip = false;
            m.disc_prior = false;
            m.discriminators = DiscMode::Dual;
        }
        "d3" => {
            m.gd_skip = true;
            m.disc_prior = false;
            m.discriminators = DiscMode::Single;
        }
        "d4" => {
            m.gd_skip = true;
            m.disc_prior = true;
            m.discriminators = DiscMode::Single;
        }
        "d5" => {
            m.gd_skip = true;
            m.disc_prior = false;
            m.discriminators = DiscMode::Dual;
        }
        "d6" => {
            m.gd_skip = true;
            m.disc_prior = true;
            m.discriminators = DiscMode::Dual;
        }
        "sp-image" => m.structure_prior = StructurePrior::Image,
        "sp-highpass" => m.structure_prior = StructurePrior::Highpass,
        "sp-gradient" => m.structure_prior = StructurePrior::Gradient,
        "w2" => m.windows = vec![2],
        "w4" => m.windows = vec![4],
        "w8" => m.windows = vec![8],
        "w222" => m.windows = vec![2, 2, 2],
        "w444" => m.windows = vec![4, 4, 4],
        "w888" => m.windows = vec![8, 8, 8],
        "w248" => m.windows = vec![2, 4, 8],
        "r1" => cfg.r = 1,
        "r2" => cfg.r = 2,
        "r3" => cfg.r = 3,
        "r5" => cfg.r = 5,
        "r10" => cfg.r = 10,
        other => return Err(ConfigError::UnknownAblation(other.to_string())),
    }
    Ok(())
}

pub fn ablation_names() -> Vec<&'static str> {
    vec![
        "M1", "M2", "M3", "M4", "M5", "M6", "M7", "D1", "D2", "D3", "D4", "D5", "D6", "SP-image",
        "SP-highpass", "SP-gradient", "W2", "W4", "W8", "W222", "W444", "W888", "W248", "R1",
        "R2", "R3", "R5", "R10",
    ]
}
