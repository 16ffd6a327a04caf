//! Arithmetic kernels: broadcast elementwise ops, matmul, softmax,
//! reductions. Each op carries its analytic gradient rule.

use super::{BackwardCtx, InputGrads, Result, Scalar, Tensor, TensorError};

// ── broadcasting ─────────────────────────────────────────────────────

/// Right-aligned shape broadcast (size-1 dims expand).
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` over the broadcast `out` shape (0 where expanded).
fn strides_over(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let offset = out.len() - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit `(out_idx, a_idx, b_idx)` for every element of the broadcast result.
fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, kind: BinKind, name: &'static str) -> Result<Tensor<F>> {
    let out_shape = broadcast_shapes(name, a.shape(), b.shape())?;
    if matches!(kind, BinKind::Div) && b.data().iter().any(|v| *v == F::zero()) {
        return Err(TensorError::Domain {
            op: "div",
            msg: "divisor contains zero".into(),
        });
    }
    let n: usize = out_shape.iter().product();
    let mut data = vec![F::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        match kind {
            BinKind::Add => {
                for i in 0..n {
                    data[i] = ad[i] + bd[i];
                }
            }
            BinKind::Sub => {
                for i in 0..n {
                    data[i] = ad[i] - bd[i];
                }
            }
            BinKind::Mul => {
                for i in 0..n {
                    data[i] = ad[i] * bd[i];
                }
            }
            BinKind::Div => {
                for i in 0..n {
                    data[i] = ad[i] / bd[i];
                }
            }
        }
    } else {
        let sa = strides_over(a.shape(), &out_shape);
        let sb = strides_over(b.shape(), &out_shape);
        match kind {
            BinKind::Add => for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = ad[ia] + bd[ib]),
            BinKind::Sub => for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = ad[ia] - bd[ib]),
            BinKind::Mul => for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = ad[ia] * bd[ib]),
            BinKind::Div => for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = ad[ia] / bd[ib]),
        }
    }

    let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
        let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
        let out_shape = ctx.output_shape;
        let g = ctx.grad;
        let sa = strides_over(a.shape(), out_shape);
        let sb = strides_over(b.shape(), out_shape);
        let mut ga = a.is_tracked().then(|| vec![F::zero(); a.elem_count()]);
        let mut gb = b.is_tracked().then(|| vec![F::zero(); b.elem_count()]);
        let (ad, bd) = (a.data(), b.data());
        for_each_pair(out_shape, &sa, &sb, |o, ia, ib| {
            match kind {
                BinKind::Add => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + g[o];
                    }
                }
                BinKind::Sub => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] - g[o];
                    }
                }
                BinKind::Mul => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o] * bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + g[o] * ad[ia];
                    }
                }
                BinKind::Div => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o] / bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] - g[o] * ad[ia] / (bd[ib] * bd[ib]);
                    }
                }
            }
        });
        vec![ga, gb]
    };
    Tensor::from_op(
        out_shape,
        data,
        name,
        vec![a.clone(), b.clone()],
        || Box::new(backward),
    )
}

// ── unary kernels ────────────────────────────────────────────────────

/// `dfdx(x, y)` receives the input and output element.
fn unary<F: Scalar>(
    x: &Tensor<F>,
    name: &'static str,
    fwd: impl Fn(F) -> F,
    dfdx: impl Fn(F, F) -> F + Send + Sync + 'static,
) -> Result<Tensor<F>> {
    let data: Vec<F> = x.data().iter().map(|&v| fwd(v)).collect();
    let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
        let xd = ctx.inputs[0].data();
        let yd = ctx.output_data;
        let g: Vec<F> = ctx
            .grad
            .iter()
            .zip(xd.iter().zip(yd.iter()))
            .map(|(&g, (&x, &y))| g * dfdx(x, y))
            .collect();
        vec![Some(g)]
    };
    Tensor::from_op(x.shape().to_vec(), data, name, vec![x.clone()], || {
        Box::new(backward)
    })
}

fn stable_sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(self, rhs, BinKind::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(self, rhs, BinKind::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(self, rhs, BinKind::Mul, "mul")
    }

    /// Elementwise division; any zero in the divisor is an error.
    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(self, rhs, BinKind::Div, "div")
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        unary(self, "neg", |v| -v, |_, _| -F::one())
    }

    pub fn exp(&self) -> Result<Tensor<F>> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    /// Natural log; non-positive inputs are an error.
    pub fn ln(&self) -> Result<Tensor<F>> {
        if self.data().iter().any(|v| *v <= F::zero()) {
            return Err(TensorError::Domain {
                op: "ln",
                msg: "input contains a non-positive value".into(),
            });
        }
        unary(self, "ln", |v| v.ln(), |x, _| F::one() / x)
    }

    /// Square root; negative inputs are an error.
    pub fn sqrt(&self) -> Result<Tensor<F>> {
        if self.data().iter().any(|v| *v < F::zero()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: "input contains a negative value".into(),
            });
        }
        let half = F::from_f64(0.5);
        unary(self, "sqrt", |v| v.sqrt(), move |_, y| half / y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        unary(self, "sigmoid", stable_sigmoid, |_, y| y * (F::one() - y))
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Result<Tensor<F>> {
        let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        unary(
            self,
            "gelu",
            |x| {
                let u = c * (x + k * x * x * x);
                half * x * (F::one() + u.tanh())
            },
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let sech2 = F::one() - t * t;
                half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
            },
        )
    }

    /// |x| with the subgradient at zero defined as 0.
    pub fn abs(&self) -> Result<Tensor<F>> {
        unary(
            self,
            "abs",
            |v| v.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// Clamp to `[lo, hi]` with a straight-through gradient: the backward
    /// pass ignores the clamp entirely.
    pub fn clamp_st(&self, lo: F, hi: F) -> Result<Tensor<F>> {
        unary(
            self,
            "clamp_st",
            move |v| v.max(lo).min(hi),
            |_, _| F::one(),
        )
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&self, scale: F, shift: F) -> Result<Tensor<F>> {
        unary(
            self,
            "affine",
            move |v| scale * v + shift,
            move |_, _| scale,
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor<F>> {
        let s: F = self.data().iter().copied().sum();
        let backward = |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let g = ctx.grad[0];
            vec![Some(vec![g; ctx.inputs[0].elem_count()])]
        };
        Tensor::from_op(vec![1], vec![s], "sum_all", vec![self.clone()], || {
            Box::new(backward)
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<F>> {
        let n = F::from_f64(self.elem_count() as f64);
        let s: F = self.data().iter().copied().sum();
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let count = ctx.inputs[0].elem_count();
            let g = ctx.grad[0] / F::from_f64(count as f64);
            vec![Some(vec![g; count])]
        };
        Tensor::from_op(vec![1], vec![s / n], "mean_all", vec![self.clone()], || {
            Box::new(backward)
        })
    }

    /// Mean over the trailing axis, kept as a size-1 dim.
    pub fn mean_last_keepdim(&self) -> Result<Tensor<F>> {
        let rank = self.rank();
        if rank == 0 {
            return Err(TensorError::BadAxis {
                op: "mean_last_keepdim",
                axis: 0,
                rank,
            });
        }
        let c = *self.shape().last().expect("rank checked");
        let rows = self.elem_count() / c;
        let inv = F::one() / F::from_f64(c as f64);
        let mut data = vec![F::zero(); rows];
        for (r, out) in data.iter_mut().enumerate() {
            let row = &self.data()[r * c..(r + 1) * c];
            *out = row.iter().copied().sum::<F>() * inv;
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank checked") = 1;
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let mut g = vec![F::zero(); ctx.inputs[0].elem_count()];
            for (r, &go) in ctx.grad.iter().enumerate() {
                let v = go * inv;
                for gi in &mut g[r * c..(r + 1) * c] {
                    *gi = v;
                }
            }
            vec![Some(g)]
        };
        Tensor::from_op(shape, data, "mean_last_keepdim", vec![self.clone()], || {
            Box::new(backward)
        })
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Max-subtracted softmax along `axis`; slices sum to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let xd = self.data();
        let mut data = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let y = ctx.output_data;
            let g = ctx.grad;
            let mut out = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = F::zero();
                    for j in 0..len {
                        let k = base + j * inner;
                        dot = dot + g[k] * y[k];
                    }
                    for j in 0..len {
                        let k = base + j * inner;
                        out[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(out)]
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "softmax",
            vec![self.clone()],
            || Box::new(backward),
        )
    }

    pub fn softmax_last(&self) -> Result<Tensor<F>> {
        self.softmax(self.rank() - 1)
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Batched matrix product `(.., m, k) @ (.., k, n) -> (.., m, n)`;
    /// leading dims broadcast.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "matmul",
                msg: format!(
                    "operands must have rank >= 2, got {:?} and {:?}",
                    self.shape(),
                    rhs.shape()
                ),
            });
        }
        let (ra, rb) = (self.rank(), rhs.rank());
        let (m, ka) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let k = ka;
        let batch = broadcast_shapes("matmul", &self.shape()[..ra - 2], &rhs.shape()[..rb - 2])?;
        let nbatch: usize = batch.iter().product();
        let sa = strides_over(&self.shape()[..ra - 2], &batch);
        let sb = strides_over(&rhs.shape()[..rb - 2], &batch);

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![F::zero(); nbatch * m * n];
        {
            let ad = self.data();
            let bd = rhs.data();
            let one = F::one();
            let zero = F::zero();
            for_each_pair(&batch, &sa, &sb, |o, ia, ib| unsafe {
                F::gemm(
                    m,
                    k,
                    n,
                    one,
                    ad.as_ptr().add(ia * m * k),
                    k as isize,
                    1,
                    bd.as_ptr().add(ib * k * n),
                    n as isize,
                    1,
                    zero,
                    data.as_mut_ptr().add(o * m * n),
                    n as isize,
                    1,
                );
            });
        }

        let backward = move |ctx: &BackwardCtx<'_, F>| -> InputGrads<F> {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let (ra, rb) = (a.rank(), b.rank());
            let batch = &ctx.output_shape[..ctx.output_shape.len() - 2];
            let sa = strides_over(&a.shape()[..ra - 2], batch);
            let sb = strides_over(&b.shape()[..rb - 2], batch);
            let g = ctx.grad;
            let one = F::one();
            let mut ga = a.is_tracked().then(|| vec![F::zero(); a.elem_count()]);
            let mut gb = b.is_tracked().then(|| vec![F::zero(); b.elem_count()]);
            let ad = a.data();
            let bd = b.data();
            for_each_pair(batch, &sa, &sb, |o, ia, ib| {
                // dA += dC @ B^T
                if let Some(ga) = ga.as_mut() {
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            k,
                            one,
                            g.as_ptr().add(o * m * n),
                            n as isize,
                            1,
                            bd.as_ptr().add(ib * k * n),
                            1,
                            n as isize,
                            one,
                            ga.as_mut_ptr().add(ia * m * k),
                            k as isize,
                            1,
                        );
                    }
                }
                // dB += A^T @ dC
                if let Some(gb) = gb.as_mut() {
                    unsafe {
                        F::gemm(
                            k,
                            m,
                            n,
                            one,
                            ad.as_ptr().add(ia * m * k),
                            1,
                            k as isize,
                            g.as_ptr().add(o * m * n),
                            n as isize,
                            1,
                            one,
                            gb.as_mut_ptr().add(ib * k * n),
                            n as isize,
                            1,
                        );
                    }
                }
            });
            vec![ga, gb]
        };
        Tensor::from_op(
            out_shape,
            data,
            "matmul",
            vec![self.clone(), rhs.clone()],
            || Box::new(backward),
        )
    }
}
