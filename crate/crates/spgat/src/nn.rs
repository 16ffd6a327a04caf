//! Parameterized layers: Linear, LayerNorm, GELU-MLP, plus the named
//! parameter store the optimizer and checkpointing work against.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Shared, swappable cell for one trainable tensor. Forward passes read
/// a cheap handle; only the optimizer replaces the value.
pub struct Param<F: Scalar> {
    cell: Arc<RwLock<Tensor<F>>>,
}

impl<F: Scalar> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            cell: Arc::clone(&self.cell),
        }
    }
}

impl<F: Scalar> Param<F> {
    pub fn new(t: Tensor<F>) -> Self {
        Param {
            cell: Arc::new(RwLock::new(t)),
        }
    }

    pub fn get(&self) -> Tensor<F> {
        self.cell.read().expect("param lock poisoned").clone()
    }

    pub fn set(&self, t: Tensor<F>) {
        *self.cell.write().expect("param lock poisoned") = t;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.get().shape().to_vec()
    }

    pub fn elem_count(&self) -> usize {
        self.get().elem_count()
    }
}

/// Named map from parameter path to its cell; iteration order is the
/// lexicographic name order, which keeps optimizer sweeps and
/// checkpoint layouts deterministic.
#[derive(Default)]
pub struct ParameterStore<F: Scalar> {
    map: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<F>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), param);
        assert!(prev.is_none(), "duplicate parameter path {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Param::elem_count).sum()
    }

    /// Absorb all entries of `other`.
    pub fn merge(&mut self, other: ParameterStore<F>) {
        for (name, p) in other.map {
            self.insert(name, p);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Param<F>)> {
        self.map
            .iter()
            .map(|(n, p)| (n.clone(), p.clone()))
            .collect()
    }
}

/// Draws from N(0, std) truncated to +-2 std, the usual transformer
/// weight init.
pub fn trunc_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller from uniform draws keeps us independent of
        // distribution crates.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(F::from_f64(z * std));
        }
    }
    Tensor::param(shape, data).expect("shape/data agree by construction")
}

pub struct Linear<F: Scalar> {
    pub weight: Param<F>, // (in, out)
    pub bias: Param<F>,   // (out,)
    in_dim: usize,
    out_dim: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = trunc_normal(rng, &[in_dim, out_dim], 0.02);
        let bias = Tensor::param(&[out_dim], vec![F::zero(); out_dim]).expect("bias");
        Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            in_dim,
            out_dim,
        }
    }

    /// Identity map; only makes sense for square layers. Test helper.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![F::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = F::one();
        }
        Linear {
            weight: Param::new(Tensor::param(&[dim, dim], w).expect("identity weight")),
            bias: Param::new(Tensor::param(&[dim], vec![F::zero(); dim]).expect("zero bias")),
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x W + b` over the trailing feature axis of any-rank input.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let rank = x.rank();
        if rank == 0 || x.shape()[rank - 1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = x.elem_count() / self.in_dim;
        let flat = x.reshape(&[rows, self.in_dim])?;
        let y = flat.matmul(&self.weight.get())?.add(&self.bias.get())?;
        let mut out_shape = x.shape().to_vec();
        out_shape[rank - 1] = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        store.insert(format!("{prefix}.w"), self.weight.clone());
        store.insert(format!("{prefix}.b"), self.bias.clone());
    }
}

pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    dim: usize,
    eps: F,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::param(&[dim], vec![F::one(); dim]).expect("gamma")),
            beta: Param::new(Tensor::param(&[dim], vec![F::zero(); dim]).expect("beta")),
            dim,
            eps: F::from_f64(1e-5),
        }
    }

    /// Per-token normalization over the trailing channel axis
    /// (population variance), then the `gamma * x + beta` affine.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let rank = x.rank();
        if rank == 0 || x.shape()[rank - 1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let mean = x.mean_last_keepdim()?;
        let centered = x.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_last_keepdim()?;
        let denom = var.affine(F::one(), self.eps)?.sqrt()?;
        let normed = centered.div(&denom)?;
        normed.mul(&self.gamma.get())?.add(&self.beta.get())
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        store.insert(format!("{prefix}.g"), self.gamma.clone());
        store.insert(format!("{prefix}.b"), self.beta.clone());
    }
}

/// Two Linears around a GELU, expansion ratio 4.
pub struct Mlp<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub const MLP_EXPANSION: usize = 4;

impl<F: Scalar> Mlp<F> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, dim * MLP_EXPANSION, rng),
            fc2: Linear::new(dim * MLP_EXPANSION, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.fc1.register(&format!("{prefix}.fc1"), store);
        self.fc2.register(&format!("{prefix}.fc2"), store);
    }
}
