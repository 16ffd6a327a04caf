//! Pure index remappings: reshape, permute, concat, narrow, cyclic
//! shifts, window (de)partitioning and the 2x2 pixel <-> channel
//! rearrangements. Values move untouched, so round trips are bitwise
//! and every gradient is the inverse remapping (scatter-add where a
//! source element fans out).

use super::{BackwardCtx, InputGrads, Result, Scalar, Tensor, TensorError};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i] = in[perm_src(i)]` for a permutation of axes.
fn permute_flat<F: Copy>(data: &[F], in_shape: &[usize], axes: &[usize]) -> Vec<F> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = row_major_strides(in_shape);
    // Stride of output dim d in the input buffer.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn expect_rank4<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a (B, H, W, C) tensor, got shape {:?}", t.shape()),
        });
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}

impl<F: Scalar> Tensor<F> {
    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        if n != self.elem_count() || shape.contains(&0) {
            return Err(TensorError::BadElementCount {
                op: "reshape",
                shape: shape.to_vec(),
                expected: self.elem_count(),
                actual: n,
            });
        }
        self.share_with_shape(shape.to_vec(), "reshape", || {
            // Row-major: the flat buffer is untouched, so the gradient is too.
            Box::new(|ctx: &BackwardCtx<'_, F>| vec![Some(ctx.grad.to_vec())])
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_flat(self.data(), self.shape(), axes);
        let axes_owned = axes.to_vec();
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let inv = invert_axes(&axes_owned);
            vec![Some(permute_flat(ctx.grad, ctx.output_shape, &inv))]
        };
        Tensor::from_op(out_shape, data, "permute", vec![self.clone()], || {
            Box::new(backward)
        })
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor<F>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose_last",
                axis: rank,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "narrow",
                axis,
                rank,
            });
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} out of bounds for dim {dim}", start + len),
            });
        }
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let mut g = vec![F::zero(); ctx.inputs[0].elem_count()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
            }
            vec![Some(g)]
        };
        Tensor::from_op(out_shape, data, "narrow", vec![self.clone()], || {
            Box::new(backward)
        })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            if p.rank() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != first.shape()[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let outer: usize = first.shape()[..axis].iter().product();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(sizes.iter()) {
                let base = o * sz * inner;
                data.extend_from_slice(&p.data()[base..base + sz * inner]);
            }
        }
        let sizes_bwd = sizes.clone();
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let mut grads: Vec<Option<Vec<F>>> = ctx
                .inputs
                .iter()
                .map(|p| Some(vec![F::zero(); p.elem_count()]))
                .collect();
            let mut cursor = 0usize;
            for o in 0..outer {
                for (pi, &sz) in sizes_bwd.iter().enumerate() {
                    let dst = o * sz * inner;
                    let g = grads[pi].as_mut().expect("allocated above");
                    g[dst..dst + sz * inner]
                        .copy_from_slice(&ctx.grad[cursor..cursor + sz * inner]);
                    cursor += sz * inner;
                }
            }
            grads
        };
        Tensor::from_op(out_shape, data, "concat", parts.to_vec(), || {
            Box::new(backward)
        })
    }

    /// Toroidal roll of the spatial axes of a `(B, H, W, C)` tensor:
    /// `out[b, r, c] = in[b, (r - sy) mod H, (c - sx) mod W]`.
    pub fn cyclic_shift2d(&self, sy: i64, sx: i64) -> Result<Tensor<F>> {
        let [b, h, w, c] = expect_rank4(self, "cyclic_shift2d")?;
        let data = roll2d(self.data(), b, h, w, c, sy, sx);
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(roll2d(ctx.grad, b, h, w, c, -sy, -sx))]
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "cyclic_shift2d",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Split a `(B, H, W, C)` grid into non-overlapping `k x k` windows:
    /// `(B * H/k * W/k, k*k, C)`, window-major, tokens row-major inside.
    pub fn window_partition(&self, k: usize) -> Result<Tensor<F>> {
        let [b, h, w, c] = expect_rank4(self, "window_partition")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: "window_partition",
                msg: format!("grid {h}x{w} not divisible by window size {k}"),
            });
        }
        let data = partition(self.data(), b, h, w, c, k, false);
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(partition(ctx.grad, b, h, w, c, k, true))]
        };
        let (nh, nw) = (h / k, w / k);
        Tensor::from_op(
            vec![b * nh * nw, k * k, c],
            data,
            "window_partition",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Inverse of [`Tensor::window_partition`]; needs the grid dims back.
    pub fn window_reverse(&self, k: usize, h: usize, w: usize) -> Result<Tensor<F>> {
        if self.rank() != 3 || self.shape()[1] != k * k {
            return Err(TensorError::InvalidArgument {
                op: "window_reverse",
                msg: format!("expected (nW, {}, C) windows, got {:?}", k * k, self.shape()),
            });
        }
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: "window_reverse",
                msg: format!("grid {h}x{w} not divisible by window size {k}"),
            });
        }
        let (nh, nw) = (h / k, w / k);
        let c = self.shape()[2];
        if self.shape()[0] % (nh * nw) != 0 {
            return Err(TensorError::InvalidArgument {
                op: "window_reverse",
                msg: format!(
                    "window count {} does not tile a {h}x{w} grid with k={k}",
                    self.shape()[0]
                ),
            });
        }
        let b = self.shape()[0] / (nh * nw);
        let data = partition(self.data(), b, h, w, c, k, true);
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(partition(ctx.grad, b, h, w, c, k, false))]
        };
        Tensor::from_op(
            vec![b, h, w, c],
            data,
            "window_reverse",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Fold each 2x2 spatial neighborhood into channels, order
    /// top-left, bottom-left, top-right, bottom-right:
    /// `(B, H, W, C) -> (B, H/2, W/2, 4C)`.
    pub fn space_to_depth2(&self) -> Result<Tensor<F>> {
        let [b, h, w, c] = expect_rank4(self, "space_to_depth2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "space_to_depth2",
                msg: format!("spatial dims {h}x{w} must be even"),
            });
        }
        let data = s2d(self.data(), b, h, w, c, false);
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(s2d(ctx.grad, b, h, w, c, true))]
        };
        Tensor::from_op(
            vec![b, h / 2, w / 2, 4 * c],
            data,
            "space_to_depth2",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Exact inverse of [`Tensor::space_to_depth2`]:
    /// `(B, H, W, 4C) -> (B, 2H, 2W, C)`.
    pub fn depth_to_space2(&self) -> Result<Tensor<F>> {
        let [b, h, w, c4] = expect_rank4(self, "depth_to_space2")?;
        if c4 % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "depth_to_space2",
                msg: format!("channel count {c4} must be a multiple of 4"),
            });
        }
        let c = c4 / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let data = s2d(self.data(), b, oh, ow, c, true);
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(s2d(ctx.grad, b, oh, ow, c, false))]
        };
        Tensor::from_op(
            vec![b, oh, ow, c],
            data,
            "depth_to_space2",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Row gather on a 2-d table: `out[i, :] = table[idx[i], :]`.
    /// Repeated indices scatter-add their gradients.
    pub fn index_select0(&self, idx: &[usize]) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "index_select0",
                msg: format!("expected a 2-d table, got {:?}", self.shape()),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "index_select0",
                msg: format!("index {bad} out of bounds for {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let idx_owned = idx.to_vec();
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let mut g = vec![F::zero(); rows * cols];
            for (r, &i) in idx_owned.iter().enumerate() {
                for c in 0..cols {
                    g[i * cols + c] = g[i * cols + c] + ctx.grad[r * cols + c];
                }
            }
            vec![Some(g)]
        };
        Tensor::from_op(
            vec![idx.len(), cols],
            data,
            "index_select0",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    /// Valid-mode 1-d correlation of a `(B, H, W, C)` tensor with a fixed
    /// kernel along axis 1 (H) or 2 (W). The output shrinks by
    /// `kernel.len() - 1` along that axis.
    pub fn correlate1d_valid(&self, axis: usize, kernel: &[F]) -> Result<Tensor<F>> {
        let [b, h, w, c] = expect_rank4(self, "correlate1d_valid")?;
        if axis != 1 && axis != 2 {
            return Err(TensorError::BadAxis {
                op: "correlate1d_valid",
                axis,
                rank: 4,
            });
        }
        let kl = kernel.len();
        let dim = if axis == 1 { h } else { w };
        if kl == 0 || kl > dim {
            return Err(TensorError::InvalidArgument {
                op: "correlate1d_valid",
                msg: format!("kernel length {kl} exceeds axis length {dim}"),
            });
        }
        let out_dim = dim - kl + 1;
        let (oh, ow) = if axis == 1 { (out_dim, w) } else { (h, out_dim) };
        let kern = kernel.to_vec();
        let data = correlate(self.data(), b, h, w, c, axis, &kern, oh, ow, false);
        let kern_bwd = kern.clone();
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            vec![Some(correlate(
                ctx.grad, b, h, w, c, axis, &kern_bwd, oh, ow, true,
            ))]
        };
        Tensor::from_op(
            vec![b, oh, ow, c],
            data,
            "correlate1d_valid",
            vec![self.clone()],
            || Box::new(backward),
        )
    }
}

fn roll2d<F: Scalar>(src: &[F], b: usize, h: usize, w: usize, c: usize, sy: i64, sx: i64) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    let sy = sy.rem_euclid(h as i64) as usize;
    let sx = sx.rem_euclid(w as i64) as usize;
    for bi in 0..b {
        for r in 0..h {
            let src_r = (r + h - sy) % h;
            for col in 0..w {
                let src_c = (col + w - sx) % w;
                let dst = ((bi * h + r) * w + col) * c;
                let s = ((bi * h + src_r) * w + src_c) * c;
                out[dst..dst + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// Forward (`inverse = false`): grid -> windows. Inverse: windows -> grid.
fn partition<F: Scalar>(
    src: &[F],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    inverse: bool,
) -> Vec<F> {
    let (nh, nw) = (h / k, w / k);
    let mut out = vec![F::zero(); src.len()];
    for bi in 0..b {
        for wr in 0..nh {
            for wc in 0..nw {
                let win = (bi * nh + wr) * nw + wc;
                for r in 0..k {
                    for col in 0..k {
                        let grid = ((bi * h + wr * k + r) * w + wc * k + col) * c;
                        let tok = (win * k * k + r * k + col) * c;
                        let (s, d) = if inverse { (tok, grid) } else { (grid, tok) };
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

/// 2x2 pixel/channel fold with quadrant order TL, BL, TR, BR.
/// `h`, `w`, `c` are always the dims of the spatial (unfolded) side.
fn s2d<F: Scalar>(src: &[F], b: usize, h: usize, w: usize, c: usize, inverse: bool) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![F::zero(); src.len()];
    // Quadrant q -> (dy, dx): TL (0,0), BL (1,0), TR (0,1), BR (1,1).
    const QUAD: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    for bi in 0..b {
        for r in 0..oh {
            for col in 0..ow {
                for (q, &(dy, dx)) in QUAD.iter().enumerate() {
                    let spatial = ((bi * h + 2 * r + dy) * w + 2 * col + dx) * c;
                    let packed = ((bi * oh + r) * ow + col) * 4 * c + q * c;
                    let (s, d) = if inverse { (packed, spatial) } else { (spatial, packed) };
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    out
}

/// Valid correlation along `axis`; the transpose (`transpose = true`)
/// scatters back: `out[.. i+j ..] += k[j] * src[.. i ..]`.
#[allow(clippy::too_many_arguments)]
fn correlate<F: Scalar>(
    src: &[F],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    axis: usize,
    kernel: &[F],
    oh: usize,
    ow: usize,
    transpose: bool,
) -> Vec<F> {
    let out_len = if transpose { b * h * w * c } else { b * oh * ow * c };
    let mut out = vec![F::zero(); out_len];
    for bi in 0..b {
        for r in 0..oh {
            for col in 0..ow {
                let o_base = ((bi * oh + r) * ow + col) * c;
                for (j, &kv) in kernel.iter().enumerate() {
                    let (ir, ic) = if axis == 1 { (r + j, col) } else { (r, col + j) };
                    let i_base = ((bi * h + ir) * w + ic) * c;
                    if transpose {
                        for ch in 0..c {
                            out[i_base + ch] = out[i_base + ch] + kv * src[o_base + ch];
                        }
                    } else {
                        for ch in 0..c {
                            out[o_base + ch] = out[o_base + ch] + kv * src[i_base + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::backward::backward;
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn reshape_round_trip_is_identical() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert!(x.bit_eq(&y));
    }

    #[test]
    fn permute_matches_index_enumeration() {
        // [[1,2],[3,4]] transposed -> [[1,3],[2,4]]
        let x = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);

        // Exhaustive oracle on a 3-d tensor.
        let shape = [2usize, 3, 4];
        let n: usize = shape.iter().product();
        let x = t(&shape, (0..n).map(|v| v as f32).collect());
        let axes = [2usize, 0, 1];
        let y = x.permute(&axes).unwrap();
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                for i2 in 0..shape[2] {
                    let src = (i0 * shape[1] + i1) * shape[2] + i2;
                    // out index (i2, i0, i1) under axes (2, 0, 1)
                    let dst = (i2 * shape[0] + i0) * shape[1] + i1;
                    assert_eq!(y.data()[dst], x.data()[src]);
                }
            }
        }
    }

    #[test]
    fn permute_grad_is_inverse_permutation() {
        let x = Tensor::<f32>::param(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let w = t(&[3], vec![1.0, 10.0, 100.0]);
        // loss = sum(permute(x) * w_broadcast) with w varying along what was axis 0.
        let y = x.permute(&[1, 0]).unwrap();
        let loss = y.mul(&t(&[2], vec![1.0, 10.0])).unwrap().sum_all().unwrap();
        drop(w);
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn concat_shape_contract_and_backward() {
        let a = Tensor::<f32>::param(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::param(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);
        let loss = c.mul(&t(&[2], vec![1.0, 5.0])).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(&b).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn concat_rejects_mismatched_off_axis() {
        let a = t(&[2, 2], vec![0.0; 4]);
        let b = t(&[3, 2], vec![0.0; 6]);
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn narrow_backward_zero_fills() {
        let x = Tensor::<f32>::param(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = x.narrow(1, 1, 3).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0]);
        let loss = y.sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cyclic_shift_enumeration_oracle() {
        // 2x2 grid [[a,b],[c,d]] shifted by (1,1) -> [[d,c],[b,a]]
        let x = t(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.cyclic_shift2d(1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn cyclic_shift_zero_is_identity() {
        let x = t(&[1, 3, 3, 2], (0..18).map(|v| v as f32).collect());
        assert!(x.cyclic_shift2d(0, 0).unwrap().bit_eq(&x));
    }

    #[test]
    fn cyclic_shift_round_trip() {
        let x = t(&[2, 4, 6, 3], (0..144).map(|v| v as f32 * 0.5).collect());
        let y = x.cyclic_shift2d(-2, 3).unwrap().cyclic_shift2d(2, -3).unwrap();
        assert!(x.bit_eq(&y));
    }

    #[test]
    fn window_partition_enumeration_oracle() {
        // 4x4 grid, k=2: token (r, c) lands in window (r/2, c/2),
        // slot (r % 2) * 2 + (c % 2).
        let x = t(&[1, 4, 4, 1], (0..16).map(|v| v as f32).collect());
        let ws = x.window_partition(2).unwrap();
        assert_eq!(ws.shape(), &[4, 4, 1]);
        for r in 0..4usize {
            for c in 0..4usize {
                let win = (r / 2) * 2 + (c / 2);
                let slot = (r % 2) * 2 + (c % 2);
                assert_eq!(ws.data()[win * 4 + slot], (r * 4 + c) as f32);
            }
        }
    }

    #[test]
    fn window_partition_degenerate_single_window() {
        let x = t(&[1, 4, 4, 1], (0..16).map(|v| v as f32).collect());
        let ws = x.window_partition(4).unwrap();
        assert_eq!(ws.shape(), &[1, 16, 1]);
        // Row-major token order.
        let expected: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(ws.data(), expected.as_slice());
    }

    #[test]
    fn window_round_trip_bitwise() {
        for k in [2usize, 4, 8] {
            let x = t(&[2, 8, 8, 3], (0..384).map(|v| (v as f32).sin()).collect());
            let y = x.window_partition(k).unwrap().window_reverse(k, 8, 8).unwrap();
            assert!(x.bit_eq(&y), "round trip failed for k={k}");
        }
    }

    #[test]
    fn space_depth_round_trip_and_order() {
        // 2x2 single-channel: channels come out TL, BL, TR, BR.
        let x = t(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.space_to_depth2().unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]); // TL, BL, TR, BR
        let z = y.depth_to_space2().unwrap();
        assert!(z.bit_eq(&x));
    }

    #[test]
    fn index_select_scatter_adds_repeats() {
        let table = Tensor::<f32>::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = table.index_select0(&[0, 2, 0]).unwrap();
        assert_eq!(picked.data(), &[1.0, 2.0, 5.0, 6.0, 1.0, 2.0]);
        let loss = picked.sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn correlate_valid_matches_hand_computation() {
        // length-5 row, kernel [1, 2, 3]: out[i] = x[i] + 2 x[i+1] + 3 x[i+2]
        let x = t(&[1, 1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.correlate1d_valid(2, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 1]);
        assert_eq!(y.data(), &[14.0, 20.0, 26.0]);
    }

    #[test]
    fn correlate_backward_is_transpose() {
        let x = Tensor::<f32>::param(&[1, 1, 4, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = x.correlate1d_valid(2, &[2.0, 5.0]).unwrap();
        let loss = y.sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        // d/dx[i] = sum over outputs touching i: [2, 7, 7, 5]
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 7.0, 7.0, 5.0]);
    }
}
