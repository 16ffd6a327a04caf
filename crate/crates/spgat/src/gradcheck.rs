//! The finite-difference verification suites behind `spgat gradcheck`:
//! every primitive op, a full parallel-windows block, and a tiny
//! guided generator, all checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{loss_adv_disc, loss_adv_gen, loss_image, loss_structure};
use crate::model::{DiscMode, ModelConfig, SpgatModel, SpgmVariant, StructurePrior};
use crate::nn::{LayerNorm, Linear, Mlp, ParameterStore};
use crate::pwstb::PwStb;
use crate::tensor::{finite_diff_check, finite_diff_check_params, Result, Scalar, Tensor};
use crate::windowing::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn random_tensor<F: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(lo + (hi - lo) * rng.random::<f64>()))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Step size balancing truncation against rounding for the width.
fn step_for<F: Scalar>() -> F {
    if F::NAME == "f32" {
        F::from_f64(5e-3)
    } else {
        F::from_f64(1e-5)
    }
}

fn check_input<F: Scalar>(
    out: &mut Vec<CheckOutcome>,
    name: &str,
    tol: f64,
    x: &Tensor<F>,
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
) {
    let report = finite_diff_check(f, x, step_for::<F>()).unwrap_or_else(|e| {
        panic!("gradcheck {name}: {e}");
    });
    out.push(CheckOutcome {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        tol,
    });
}

/// Every primitive operation on small fixed-seed inputs.
pub fn run_op_suite<F: Scalar>(tol: f64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let x = random_tensor::<F>(&[2, 3], 1, -1.0, 1.0);
    let y = random_tensor::<F>(&[2, 3], 2, -1.0, 1.0);
    let pos = random_tensor::<F>(&[2, 3], 3, 0.5, 2.0);

    check_input(&mut out, "add", tol, &x, |t| t.add(&y)?.mul(t)?.sum_all());
    check_input(&mut out, "sub", tol, &x, |t| t.sub(&y)?.mul(t)?.sum_all());
    check_input(&mut out, "mul", tol, &x, |t| t.mul(&y)?.mul(t)?.sum_all());
    check_input(&mut out, "div", tol, &x, |t| t.div(&pos)?.mul(t)?.sum_all());
    check_input(&mut out, "div_rhs", tol, &pos, |t| x.div(t)?.sum_all());
    check_input(&mut out, "neg", tol, &x, |t| t.neg()?.mul(&y)?.sum_all());
    check_input(&mut out, "exp", tol, &x, |t| t.exp()?.mul(&y)?.sum_all());
    check_input(&mut out, "log", tol, &pos, |t| t.ln()?.sum_all());
    check_input(&mut out, "sqrt", tol, &pos, |t| t.sqrt()?.mul(&y)?.sum_all());
    check_input(&mut out, "sigmoid", tol, &x, |t| {
        t.sigmoid()?.mul(&y)?.sum_all()
    });
    check_input(&mut out, "gelu", tol, &x, |t| t.gelu()?.mul(&y)?.sum_all());
    // Keep |x| away from the kink so central differences are valid.
    let off_zero = random_tensor::<F>(&[2, 3], 4, 0.2, 1.0);
    check_input(&mut out, "abs", tol, &off_zero, |t| {
        t.neg()?.abs()?.mul(&y)?.sum_all()
    });
    check_input(&mut out, "clamp_st", tol, &x, |t| {
        t.clamp_st(F::from_f64(-0.8), F::from_f64(0.8))?.mul(&y)?.sum_all()
    });
    check_input(&mut out, "affine", tol, &x, |t| {
        t.affine(F::from_f64(1.7), F::from_f64(-0.3))?.mul(t)?.sum_all()
    });
    check_input(&mut out, "matmul_lhs", tol, &x, |t| {
        let w = random_tensor::<F>(&[3, 2], 5, -1.0, 1.0);
        let z = t.matmul(&w)?;
        z.mul(&z)?.sum_all()
    });
    let w0 = random_tensor::<F>(&[3, 2], 5, -1.0, 1.0);
    check_input(&mut out, "matmul_rhs", tol, &w0, |w| {
        let z = x.matmul(w)?;
        z.mul(&z)?.sum_all()
    });
    let batched = random_tensor::<F>(&[2, 2, 3], 6, -1.0, 1.0);
    check_input(&mut out, "matmul_batched", tol, &batched, |t| {
        let w = random_tensor::<F>(&[3, 3], 7, -1.0, 1.0);
        let z = t.matmul(&w)?;
        z.mul(&z)?.sum_all()
    });
    check_input(&mut out, "softmax", tol, &x, |t| {
        t.softmax_last()?.mul(&y)?.sum_all()
    });
    check_input(&mut out, "mean_all", tol, &x, |t| t.mul(t)?.mean_all());
    check_input(&mut out, "mean_last_keepdim", tol, &x, |t| {
        let m = t.mean_last_keepdim()?;
        t.sub(&m)?.mul(t)?.sum_all()
    });
    check_input(&mut out, "broadcast_bias", tol, &x, |t| {
        let b = random_tensor::<F>(&[3], 8, -1.0, 1.0);
        t.add(&b)?.mul(t)?.sum_all()
    });

    // Index remaps.
    let grid = random_tensor::<F>(&[1, 4, 4, 2], 9, -1.0, 1.0);
    let weight = random_tensor::<F>(&[1, 4, 4, 2], 10, -1.0, 1.0);
    check_input(&mut out, "reshape", tol, &x, |t| {
        t.reshape(&[3, 2])?.mul(&t.reshape(&[3, 2])?)?.sum_all()
    });
    check_input(&mut out, "permute", tol, &x, |t| {
        t.permute(&[1, 0])?.matmul(&x)?.sum_all()
    });
    check_input(&mut out, "concat", tol, &x, |t| {
        Tensor::concat(&[t.clone(), y.clone()], 1)?.mul(&random_tensor::<F>(&[2, 6], 11, -1.0, 1.0))?.sum_all()
    });
    check_input(&mut out, "narrow", tol, &x, |t| {
        t.narrow(1, 1, 2)?.mul(&t.narrow(1, 0, 2)?)?.sum_all()
    });
    check_input(&mut out, "cyclic_shift", tol, &grid, |t| {
        t.cyclic_shift2d(1, -1)?.mul(&weight)?.sum_all()
    });
    check_input(&mut out, "window_partition", tol, &grid, |t| {
        let ws = t.window_partition(2)?;
        ws.mul(&ws)?.sum_all()
    });
    check_input(&mut out, "window_reverse", tol, &grid, |t| {
        let back = t.window_partition(2)?.window_reverse(2, 4, 4)?;
        back.mul(&weight)?.sum_all()
    });
    check_input(&mut out, "space_to_depth", tol, &grid, |t| {
        let z = t.space_to_depth2()?;
        z.mul(&z)?.sum_all()
    });
    check_input(&mut out, "depth_to_space", tol, &grid, |t| {
        let z = t.space_to_depth2()?.depth_to_space2()?;
        z.mul(&weight)?.sum_all()
    });
    let table = random_tensor::<F>(&[5, 3], 12, -1.0, 1.0);
    check_input(&mut out, "index_select", tol, &table, |t| {
        let rows = t.index_select0(&[0, 2, 2, 4])?;
        rows.mul(&rows)?.sum_all()
    });
    let img = random_tensor::<F>(&[1, 6, 6, 1], 13, 0.0, 1.0);
    check_input(&mut out, "correlate1d", tol, &img, |t| {
        let k = [F::from_f64(0.25), F::from_f64(0.5), F::from_f64(0.25)];
        let z = t.correlate1d_valid(1, &k)?.correlate1d_valid(2, &k)?;
        z.mul(&z)?.sum_all()
    });

    // Layers through their parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lin = Linear::<F>::new(3, 2, &mut rng);
    let mut store = ParameterStore::new();
    lin.register("lin", &mut store);
    let xf = random_tensor::<F>(&[2, 3], 15, -1.0, 1.0);
    let report = finite_diff_check_params(
        &store.named_params(),
        || {
            let z = lin.forward(&xf)?;
            z.mul(&z)?.sum_all()
        },
        step_for::<F>(),
        None,
        0,
    )
    .expect("linear params");
    out.push(CheckOutcome {
        name: "linear_params".into(),
        max_rel_err: report.max_rel_err,
        tol,
    });

    let ln = LayerNorm::<F>::new(3);
    let mut store = ParameterStore::new();
    ln.register("ln", &mut store);
    let report = finite_diff_check_params(
        &store.named_params(),
        || {
            let z = ln.forward(&xf)?;
            z.mul(&z)?.sum_all()
        },
        step_for::<F>(),
        None,
        1,
    )
    .expect("layer_norm params");
    out.push(CheckOutcome {
        name: "layer_norm_params".into(),
        max_rel_err: report.max_rel_err,
        tol,
    });
    check_input(&mut out, "layer_norm_input", tol, &xf, |t| {
        let z = ln.forward(t)?;
        z.mul(&z)?.sum_all()
    });

    let mlp = Mlp::<F>::new(3, &mut rng);
    let mut store = ParameterStore::new();
    mlp.register("mlp", &mut store);
    let report = finite_diff_check_params(
        &store.named_params(),
        || {
            let z = mlp.forward(&xf)?;
            z.mul(&z)?.sum_all()
        },
        step_for::<F>(),
        None,
        2,
    )
    .expect("mlp params");
    out.push(CheckOutcome {
        name: "mlp_params".into(),
        max_rel_err: report.max_rel_err,
        tol,
    });

    // Losses.
    let a = random_tensor::<F>(&[1, 12, 12, 1], 16, 0.1, 0.9);
    let b = random_tensor::<F>(&[1, 12, 12, 1], 17, 0.1, 0.9);
    check_input(&mut out, "loss_image", tol, &a, |t| loss_image(t, &b));
    // Keep |p_hat - p| away from the L1 kink.
    let p = random_tensor::<F>(&[2, 4], 18, 0.0, 0.3);
    let p_hat = random_tensor::<F>(&[2, 4], 19, 0.5, 1.0);
    check_input(&mut out, "loss_structure", tol, &p_hat, |t| {
        loss_structure(t, &p)
    });
    let real = random_tensor::<F>(&[6], 20, -1.0, 1.0);
    let fake = random_tensor::<F>(&[6], 21, -1.0, 1.0);
    check_input(&mut out, "loss_adv_disc", tol, &fake, |t| {
        loss_adv_disc(&real, t)
    });
    check_input(&mut out, "loss_adv_gen", tol, &fake, |t| {
        loss_adv_gen(&real, t)
    });
    out
}

/// One PW-STB at C = 8 on an 8x8 grid, all parameters probed at a few
/// coordinates each.
pub fn run_block_suite<F: Scalar>(tol: f64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let block = PwStb::<F>::new(8, 4, &[2, 4, 8], true, &mut rng).expect("block");
    let mut store = ParameterStore::new();
    block.register("block", &mut store);
    let x = random_tensor::<F>(&[1, 8, 8, 8], 41, -0.5, 0.5);
    let weight = random_tensor::<F>(&[1, 8, 8, 8], 42, -1.0, 1.0);
    let report = finite_diff_check_params(
        &store.named_params(),
        || {
            let out = block.forward(&TokenGrid::new(x.clone(), 2))?;
            out.tensor.mul(&weight)?.sum_all()
        },
        step_for::<F>(),
        Some(4),
        43,
    )
    .expect("block params");
    vec![CheckOutcome {
        name: format!("pwstb_c8_{}", F::NAME),
        max_rel_err: report.max_rel_err,
        tol,
    }]
}

/// A tiny guided generator+SPE pair (C = 8, depths [1,1,1,1]) on a
/// 32x32 input; the full model path including SPGM gating.
pub fn run_model_suite<F: Scalar>(tol: f64) -> Vec<CheckOutcome> {
    let cfg = ModelConfig {
        c: 8,
        gen_depths: [1, 1, 1, 1],
        spe_depths: [1, 1, 1, 1],
        windows: vec![2, 4, 8],
        discriminators: DiscMode::Off,
        gd_skip: false,
        disc_prior: false,
        spgm: SpgmVariant::MultiplyAdd,
        structure_prior: StructurePrior::Gradient,
        ..Default::default()
    };
    let model = SpgatModel::<F>::new(&cfg, 44).expect("tiny model");
    let img = random_tensor::<F>(&[1, 32, 32, 3], 45, 0.0, 1.0);
    let s = crate::model::extract_structure(&img, StructurePrior::Gradient).expect("structure");
    let weight = random_tensor::<F>(&[1, 32, 32, 3], 46, -1.0, 1.0);
    let report = finite_diff_check_params(
        &model.gen_params.named_params(),
        || {
            let out = model.forward_pair(&img, Some(&s))?;
            let a = out.image.mul(&weight)?.sum_all()?;
            let b = out.structure.expect("spe present").mul(&weight)?.sum_all()?;
            a.add(&b)
        },
        step_for::<F>(),
        Some(2),
        47,
    )
    .expect("model params");
    vec![CheckOutcome {
        name: format!("tiny_generator_{}", F::NAME),
        max_rel_err: report.max_rel_err,
        tol,
    }]
}

pub fn run_scope<F: Scalar>(scope: Scope, tol: f64) -> Vec<CheckOutcome> {
    match scope {
        Scope::Op => run_op_suite::<F>(tol),
        Scope::Block => run_block_suite::<F>(tol),
        Scope::Model => run_model_suite::<F>(tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_f32_and_f64() {
        for outcome in run_op_suite::<f32>(1e-3) {
            assert!(
                outcome.passed(),
                "f32 {}: rel err {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
        for outcome in run_op_suite::<f64>(1e-6) {
            assert!(
                outcome.passed(),
                "f64 {}: rel err {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
    }

    #[test]
    fn block_suite_passes() {
        for outcome in run_block_suite::<f64>(1e-6) {
            assert!(outcome.passed(), "{}: {}", outcome.name, outcome.max_rel_err);
        }
    }
}
