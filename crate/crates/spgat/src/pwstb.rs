//! Parallel-windows transformer block: three attention branches at
//! window sizes 2/4/8 run on one shared LayerNorm output and are summed
//! with the residual, then an MLP line; the same again with shifted
//! windows. Four lines total per block:
//!
//! ```text
//! a   = sum_k W-MSA_k(LN(z))  + z
//! b   = MLP(LN(a))            + a
//! c   = sum_k SW-MSA_k(LN(b)) + b
//! out = MLP(LN(c))            + c
//! ```

use rand::Rng;

use crate::attention::WindowAttention;
use crate::nn::{LayerNorm, Mlp, ParameterStore};
use crate::tensor::{Result, Scalar, Tensor};
use crate::windowing::TokenGrid;

pub struct PwStb<F: Scalar> {
    ln1: LayerNorm<F>,
    ln2: LayerNorm<F>,
    ln3: LayerNorm<F>,
    ln4: LayerNorm<F>,
    /// One attention layer per configured window size, in config order;
    /// every branch owns independent qkv/proj/bias parameters.
    w_branches: Vec<WindowAttention<F>>,
    sw_branches: Vec<WindowAttention<F>>,
    mlp1: Mlp<F>,
    mlp2: Mlp<F>,
}

impl<F: Scalar> PwStb<F> {
    pub fn new(
        dim: usize,
        heads: usize,
        windows: &[usize],
        use_rel_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w_branches = Vec::with_capacity(windows.len());
        let mut sw_branches = Vec::with_capacity(windows.len());
        for &k in windows {
            w_branches.push(WindowAttention::new(dim, heads, k, use_rel_bias, rng)?);
            sw_branches.push(WindowAttention::new(dim, heads, k, use_rel_bias, rng)?);
        }
        Ok(PwStb {
            ln1: LayerNorm::new(dim),
            ln2: LayerNorm::new(dim),
            ln3: LayerNorm::new(dim),
            ln4: LayerNorm::new(dim),
            w_branches,
            sw_branches,
            mlp1: Mlp::new(dim, rng),
            mlp2: Mlp::new(dim, rng),
        })
    }

    /// Sum of all branch outputs on the same normalized input, plus the
    /// residual. Branches run in config order so float results are
    /// reproducible.
    fn attention_line(
        branches: &[WindowAttention<F>],
        ln: &LayerNorm<F>,
        z: &TokenGrid<F>,
        shifted: bool,
    ) -> Result<Tensor<F>> {
        let normed = TokenGrid::new(ln.forward(&z.tensor)?, z.stage_scale);
        let mut acc: Option<Tensor<F>> = None;
        for branch in branches {
            let out = if shifted {
                branch.swmsa(&normed)?
            } else {
                branch.wmsa_grid(&normed)?
            };
            acc = Some(match acc {
                Some(sum) => sum.add(&out.tensor)?,
                None => out.tensor,
            });
        }
        match acc {
            Some(sum) => sum.add(&z.tensor),
            None => Ok(z.tensor.clone()),
        }
    }

    pub fn forward(&self, z: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let scale = z.stage_scale;
        let a = Self::attention_line(&self.w_branches, &self.ln1, z, false)?;
        let a = TokenGrid::new(a, scale);
        let b = self.mlp1.forward(&self.ln2.forward(&a.tensor)?)?.add(&a.tensor)?;
        let b = TokenGrid::new(b, scale);
        let c = Self::attention_line(&self.sw_branches, &self.ln3, &b, true)?;
        let c = TokenGrid::new(c, scale);
        let out = self.mlp2.forward(&self.ln4.forward(&c.tensor)?)?.add(&c.tensor)?;
        Ok(TokenGrid::new(out, scale))
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.ln1.register(&format!("{prefix}.ln1"), store);
        self.ln2.register(&format!("{prefix}.ln2"), store);
        self.ln3.register(&format!("{prefix}.ln3"), store);
        self.ln4.register(&format!("{prefix}.ln4"), store);
        for (i, b) in self.w_branches.iter().enumerate() {
            b.register(&format!("{prefix}.w{i}"), store);
        }
        for (i, b) in self.sw_branches.iter().enumerate() {
            b.register(&format!("{prefix}.sw{i}"), store);
        }
        self.mlp1.register(&format!("{prefix}.mlp1"), store);
        self.mlp2.register(&format!("{prefix}.mlp2"), store);
    }
}
