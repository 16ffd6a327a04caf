//! Window-scoped multi-head self-attention and its shifted variant.
//!
//! Attention never crosses window borders: each k x k window is an
//! exact attention scope. The shifted variant rolls the grid by half a
//! window first and masks pairs that wrapped in from different regions,
//! which restores cross-window mixing over two consecutive applications.

use rand::Rng;

use crate::nn::{trunc_normal, Linear, Param, ParameterStore};
use crate::tensor::{no_grad, Result, Scalar, Tensor, TensorError};
use crate::windowing::{
    build_shift_mask, cyclic_shift, effective_window, window_partition, window_reverse,
    ShiftMask, TokenGrid, WindowSet,
};

pub struct WindowAttention<F: Scalar> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    /// Relative position bias table, `((2k-1)^2, heads)`; disabled by a
    /// config switch so permutation tests can run without it.
    pub rel_bias: Option<Param<F>>,
    dim: usize,
    heads: usize,
    window_size: usize,
    scale: F,
}

impl<F: Scalar> WindowAttention<F> {
    pub fn new(
        dim: usize,
        heads: usize,
        window_size: usize,
        use_rel_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "window_attention",
                msg: format!("channel dim {dim} not divisible by {heads} heads"),
            });
        }
        let table = 2 * window_size - 1;
        let rel_bias =
            use_rel_bias.then(|| Param::new(trunc_normal(rng, &[table * table, heads], 0.02)));
        let head_dim = dim / heads;
        Ok(WindowAttention {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            rel_bias,
            dim,
            heads,
            window_size,
            scale: F::from_f64(1.0 / (head_dim as f64).sqrt()),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Bias matrix `(heads, n, n)` for an effective window `k_eff <= k`,
    /// sliced out of the full table by relative offset.
    fn bias_matrix(&self, k_eff: usize) -> Result<Option<Tensor<F>>> {
        let Some(table) = &self.rel_bias else {
            return Ok(None);
        };
        let k = self.window_size;
        let span = 2 * k - 1;
        let n = k_eff * k_eff;
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            let (ri, ci) = (i / k_eff, i % k_eff);
            for j in 0..n {
                let (rj, cj) = (j / k_eff, j % k_eff);
                let dy = ri as i64 - rj as i64 + (k as i64 - 1);
                let dx = ci as i64 - cj as i64 + (k as i64 - 1);
                idx.push((dy as usize) * span + dx as usize);
            }
        }
        let rows = table.get().index_select0(&idx)?; // (n*n, heads)
        let bias = rows
            .reshape(&[n, n, self.heads])?
            .permute(&[2, 0, 1])?;
        Ok(Some(bias))
    }

    fn split_heads(&self, x: &Tensor<F>, bnw: usize, n: usize) -> Result<Tensor<F>> {
        x.reshape(&[bnw, n, self.heads, self.dim / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention logits after scale, bias and mask, ready for softmax.
    fn logits(&self, ws: &WindowSet<F>, mask: Option<&ShiftMask<F>>) -> Result<Tensor<F>> {
        if ws.window_size * ws.window_size != ws.tensor.shape()[1] {
            return Err(TensorError::InvalidArgument {
                op: "wmsa",
                msg: format!(
                    "window set claims k={} but has {} tokens per window",
                    ws.window_size,
                    ws.tensor.shape()[1]
                ),
            });
        }
        let k_eff = ws.window_size;
        if k_eff > self.window_size {
            return Err(TensorError::InvalidArgument {
                op: "wmsa",
                msg: format!(
                    "window size {k_eff} exceeds layer window {}",
                    self.window_size
                ),
            });
        }
        let (bnw, n, c) = (
            ws.tensor.shape()[0],
            ws.tensor.shape()[1],
            ws.tensor.shape()[2],
        );
        if c != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "wmsa",
                lhs: ws.tensor.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let qkv = self.qkv.forward(&ws.tensor)?;
        let q = self.split_heads(&qkv.narrow(2, 0, c)?, bnw, n)?;
        let key = self.split_heads(&qkv.narrow(2, c, c)?, bnw, n)?;
        let mut logits = q
            .matmul(&key.transpose_last()?)?
            .affine(self.scale, F::zero())?;
        if let Some(bias) = self.bias_matrix(k_eff)? {
            logits = logits.add(&bias)?;
        }
        if let Some(mask) = mask {
            let nw = mask.tensor.shape()[0];
            if bnw % nw != 0 {
                return Err(TensorError::InvalidArgument {
                    op: "wmsa",
                    msg: format!("{bnw} windows do not split into {nw} mask groups"),
                });
            }
            let b = bnw / nw;
            let masked = logits
                .reshape(&[b, nw, self.heads, n, n])?
                .add(&mask.tensor.reshape(&[nw, 1, n, n])?)?;
            logits = masked.reshape(&[bnw, self.heads, n, n])?;
        }
        Ok(logits)
    }

    /// Per window, per head: `softmax(QK^T / sqrt(d) + bias + mask) V`,
    /// heads joined, then the output projection. Shape preserving.
    pub fn wmsa(&self, ws: &WindowSet<F>, mask: Option<&ShiftMask<F>>) -> Result<WindowSet<F>> {
        let (bnw, n, c) = (
            ws.tensor.shape()[0],
            ws.tensor.shape()[1],
            ws.tensor.shape()[2],
        );
        let probs = self.logits(ws, mask)?.softmax_last()?;
        let v = self.split_heads(&self.qkv.forward(&ws.tensor)?.narrow(2, 2 * c, c)?, bnw, n)?;
        let mixed = probs
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bnw, n, c])?;
        Ok(WindowSet {
            tensor: self.proj.forward(&mixed)?,
            window_size: ws.window_size,
            grid_dims: ws.grid_dims,
        })
    }

    /// Attention weights `(B*nW, heads, n, n)` for inspection; detached.
    pub fn attention_probs(
        &self,
        ws: &WindowSet<F>,
        mask: Option<&ShiftMask<F>>,
    ) -> Result<Tensor<F>> {
        no_grad(|| self.logits(ws, mask)?.softmax_last())
    }

    /// Unshifted windowed attention over a whole grid, clamping the
    /// window to the grid when needed.
    pub fn wmsa_grid(&self, grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let (_, h, w, _) = grid.dims();
        let (k_eff, _) = effective_window(self.window_size, h, w);
        let ws = window_partition(grid, k_eff)?;
        window_reverse(&self.wmsa(&ws, None)?, grid.stage_scale)
    }

    /// Shifted windowed attention: roll by half a window, attend under
    /// the region mask, roll back. Falls back to the plain path when a
    /// single window already covers the grid.
    pub fn swmsa(&self, grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let (_, h, w, _) = grid.dims();
        let (k_eff, shift) = effective_window(self.window_size, h, w);
        if shift == 0 {
            return self.wmsa_grid(grid);
        }
        let s = shift as i64;
        let rolled = cyclic_shift(grid, -s, -s)?;
        let ws = window_partition(&rolled, k_eff)?;
        let mask = build_shift_mask::<F>(h, w, k_eff, shift)?;
        let attended = self.wmsa(&ws, Some(&mask))?;
        let back = window_reverse(&attended, grid.stage_scale)?;
        cyclic_shift(&back, s, s)
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.qkv.register(&format!("{prefix}.qkv"), store);
        self.proj.register(&format!("{prefix}.proj"), store);
        if let Some(bias) = &self.rel_bias {
            store.insert(format!("{prefix}.rel_bias"), bias.clone());
        }
    }
}
