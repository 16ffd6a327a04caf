//! Structure-guided feature fusion. The elementwise form gates a
//! feature map by the matching SPE feature without any parameters:
//! `f_p * f_e + f_e`. Zero prior features make every site an exact
//! identity. The concat variant trades that for a learned projection.

use super::SpgmVariant;
use crate::nn::Linear;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Gate a generator/SPE-aligned feature by the structure feature.
/// `site_linear` is only consulted by the concat variant.
pub fn spgm_apply<F: Scalar>(
    f_e: &Tensor<F>,
    f_p: &Tensor<F>,
    variant: SpgmVariant,
    site_linear: Option<&Linear<F>>,
) -> Result<Tensor<F>> {
    match variant {
        SpgmVariant::Off => Ok(f_e.clone()),
        SpgmVariant::MultiplyAdd => {
            if f_e.shape() != f_p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "spgm_apply",
                    lhs: f_e.shape().to_vec(),
                    rhs: f_p.shape().to_vec(),
                });
            }
            f_p.mul(f_e)?.add(f_e)
        }
        SpgmVariant::ConcatLinear => {
            let lin = site_linear.ok_or_else(|| TensorError::InvalidArgument {
                op: "spgm_apply",
                msg: "concat variant needs its per-site linear layer".into(),
            })?;
            let cat = Tensor::concat(&[f_p.clone(), f_e.clone()], f_e.rank() - 1)?;
            lin.forward(&cat)
        }
    }
}

/// Discriminator-side fusion: a skip from the generator
/// (`H = Linear(concat[f_d, f_g])`, or `f_d` when the skip is off),
/// then the same elementwise gating by the SPE feature.
pub fn disc_fuse<F: Scalar>(
    f_d: &Tensor<F>,
    f_g: Option<&Tensor<F>>,
    f_p: Option<&Tensor<F>>,
    skip_linear: Option<&Linear<F>>,
) -> Result<Tensor<F>> {
    let h = match (f_g, skip_linear) {
        (Some(f_g), Some(lin)) => {
            if f_d.shape() != f_g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "disc_fuse",
                    lhs: f_d.shape().to_vec(),
                    rhs: f_g.shape().to_vec(),
                });
            }
            let cat = Tensor::concat(&[f_d.clone(), f_g.clone()], f_d.rank() - 1)?;
            lin.forward(&cat)?
        }
        _ => f_d.clone(),
    };
    match f_p {
        Some(f_p) => {
            if h.shape() != f_p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "disc_fuse",
                    lhs: h.shape().to_vec(),
                    rhs: f_p.shape().to_vec(),
                });
            }
            f_p.mul(&h)?.add(&h)
        }
        None => Ok(h),
    }
}
