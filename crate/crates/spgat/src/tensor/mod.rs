//! Dense n-dimensional tensors with reverse-mode differentiation.
//!
//! Every value flowing through the networks is a [`Tensor`]: a flat,
//! row-major buffer plus shape metadata. Operations that consume tracked
//! tensors record a backward rule on the output, forming an acyclic graph
//! that [`backward`] replays in reverse to fill gradients. Kernels are
//! single-threaded and deterministic; parallelism, if any, lives above
//! this module.

mod backward;
mod check;
mod ops;
mod remap;

pub use backward::{backward, no_grad, with_nan_check, Gradients};
pub use check::{finite_diff_check, finite_diff_check_params, FdReport, FD_STEP_F32, FD_STEP_F64};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} implies {expected} elements, got {actual}")]
    BadElementCount {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid axis {axis} for rank-{rank} tensor")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: domain error, {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type the kernels run at. `f32` is the training precision;
/// `f64` exists so gradient checks can re-run a graph with rounding
/// error out of the picture.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A @ B + beta * C over raw buffers with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n` and `m x n` elements under the
    /// given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Gradient contributions per op input; `None` marks an input that takes
/// no gradient (constants, index arguments).
pub(crate) type InputGrads<F> = Vec<Option<Vec<F>>>;

pub(crate) struct BackwardCtx<'a, F: Scalar> {
    /// Gradient of the loss w.r.t. the op output, flat.
    pub grad: &'a [F],
    pub inputs: &'a [Tensor<F>],
    pub output_data: &'a [F],
    pub output_shape: &'a [usize],
}

pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&BackwardCtx<'_, F>) -> InputGrads<F> + Send + Sync>;

pub(crate) struct OpNode<F: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<F>>,
    pub backward: BackwardFn<F>,
}

struct TensorInner<F: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    op: Option<OpNode<F>>,
    grad: Mutex<Option<Vec<F>>>,
}

/// Immutable dense tensor handle. Cloning is cheap and shares storage.
pub struct Tensor<F: Scalar = f32> {
    inner: Arc<TensorInner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn checked_elem_count(shape: &[usize], op: &'static str) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::InvalidArgument {
                op,
                msg: format!("shape {shape:?} overflows element count"),
            })?;
    }
    Ok(n)
}

impl<F: Scalar> Tensor<F> {
    fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: &'static str) -> Result<Self> {
        let n = checked_elem_count(&shape, op)?;
        if n != data.len() {
            return Err(TensorError::BadElementCount {
                op,
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                op: None,
                grad: Mutex::new(None),
            }),
        })
    }

    /// Plain data tensor; nothing is recorded through it.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false, "from_vec")
    }

    /// Trainable leaf: backward deposits a gradient for it.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true, "param")
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_elem_count(shape, "zeros")?;
        Self::from_vec(shape, vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        let n = checked_elem_count(shape, "full")?;
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar construction cannot fail")
    }

    /// Wrapper used by ops: decides whether to record, based on the
    /// thread-local no-grad flag and whether any input is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        name: &'static str,
        inputs: Vec<Tensor<F>>,
        make_backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Result<Self> {
        debug_assert_eq!(
            checked_elem_count(&shape, name).unwrap_or(usize::MAX),
            data.len(),
            "{name}: internal shape/data mismatch"
        );
        if backward::nan_check_active() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let record = !backward::no_grad_active() && inputs.iter().any(Tensor::is_tracked);
        let op = if record {
            Some(OpNode {
                name,
                inputs,
                backward: make_backward(),
            })
        } else {
            None
        };
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                requires_grad: record,
                op,
                grad: Mutex::new(None),
            }),
        })
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.data.to_vec()
    }

    /// Scalar extraction; errors on anything but a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.elem_count() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                msg: format!("expected a scalar, got shape {:?}", self.shape()),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True if gradients flow to or through this tensor.
    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&OpNode<F>> {
        self.inner.op.as_ref()
    }

    /// Same data, cut loose from the graph. Gradients stop here.
    pub fn detach(&self) -> Tensor<F> {
        Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: false,
                op: None,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Gradient recorded by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub(crate) fn set_grad(&self, g: Vec<F>) {
        *self.inner.grad.lock().expect("grad lock poisoned") = Some(g);
    }

    pub(crate) fn share_with_shape(
        &self,
        shape: Vec<usize>,
        name: &'static str,
        make_backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Result<Self> {
        let record = !backward::no_grad_active() && self.is_tracked();
        let op = if record {
            Some(OpNode {
                name,
                inputs: vec![self.clone()],
                backward: make_backward(),
            })
        } else {
            None
        };
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::clone(&self.inner.data),
                requires_grad: record,
                op,
                grad: Mutex::new(None),
            }),
        })
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor<F>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
