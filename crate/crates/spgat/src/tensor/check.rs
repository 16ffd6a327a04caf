//! Central-difference verification of recorded gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Result, Scalar, Tensor};
use crate::nn::Param;

/// Central-difference steps balancing truncation against rounding noise
/// (roughly cbrt of the machine epsilon at each width).
pub const FD_STEP_F32: f32 = 5e-3;
pub const FD_STEP_F64: f64 = 1e-5;

/// Outcome of one finite-difference sweep. `max_rel_err` is the largest
/// absolute deviation between recorded and central-difference gradients,
/// scaled by the overall gradient magnitude:
/// `max_i |ad_i - fd_i| / max(||ad||_inf, ||fd||_inf, 1e-12)`.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked_coords: usize,
    pub worst: Option<(String, usize)>,
}

impl FdReport {
    fn empty() -> Self {
        FdReport {
            max_rel_err: 0.0,
            checked_coords: 0,
            worst: None,
        }
    }

    fn fold(&mut self, name: &str, coord: usize, rel: f64) {
        self.checked_coords += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((name.to_string(), coord));
        }
    }
}

fn with_perturbed<F: Scalar>(x: &Tensor<F>, i: usize, delta: F) -> Tensor<F> {
    let mut data = x.to_vec();
    data[i] = data[i] + delta;
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Compare the recorded gradient of a scalar function against central
/// differences at every coordinate of `x`.
pub fn finite_diff_check<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    h: F,
) -> Result<FdReport> {
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let loss = f(&leaf)?;
    let grads = backward::backward(&loss)?;
    let ad = grads.get_or_zeros(&leaf);

    let n = x.elem_count();
    let mut fd = vec![0.0f64; n];
    for i in 0..n {
        let up = f(&with_perturbed(x, i, h))?.item()?.as_f64();
        let down = f(&with_perturbed(x, i, -h))?.item()?.as_f64();
        fd[i] = (up - down) / (2.0 * h.as_f64());
    }

    let scale = ad
        .iter()
        .map(|v| v.as_f64().abs())
        .chain(fd.iter().map(|v| v.abs()))
        .fold(1e-12f64, f64::max);
    let mut report = FdReport::empty();
    for i in 0..n {
        let rel = (ad[i].as_f64() - fd[i]).abs() / scale;
        report.fold("x", i, rel);
    }
    Ok(report)
}

/// Same sweep, but over named parameters consumed by a closure `f` that
/// reads them through their [`Param`] cells. With `coords_per_param`
/// set, only that many coordinates of each parameter are probed
/// (chosen by a fixed-seed shuffle); the recorded gradient is always
/// complete.
pub fn finite_diff_check_params<F: Scalar>(
    params: &[(String, Param<F>)],
    f: impl Fn() -> Result<Tensor<F>>,
    h: F,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<FdReport> {
    let loss = f()?;
    let grads = backward::backward(&loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::empty();
    for (name, param) in params {
        let base = param.get();
        let ad = grads.get_or_zeros(&base);
        let n = base.elem_count();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(limit.min(n));
        }

        let mut fd = vec![0.0f64; coords.len()];
        for (slot, &i) in coords.iter().enumerate() {
            param.set(with_perturbed(&base, i, h));
            let up = f()?.item()?.as_f64();
            param.set(with_perturbed(&base, i, -h));
            let down = f()?.item()?.as_f64();
            fd[slot] = (up - down) / (2.0 * h.as_f64());
        }
        param.set(base.clone());

        let scale = coords
            .iter()
            .map(|&i| ad[i].as_f64().abs())
            .chain(fd.iter().map(|v| v.abs()))
            .fold(1e-12f64, f64::max);
        for (slot, &i) in coords.iter().enumerate() {
            let rel = (ad[i].as_f64() - fd[slot]).abs() / scale;
            report.fold(name, i, rel);
        }
    }
    Ok(report)
}
