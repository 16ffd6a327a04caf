//! Reverse-mode sweep over the recorded graph.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{BackwardCtx, Result, Scalar, Tensor, TensorError, TensorId};

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
    static NAN_CHECK: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn no_grad_active() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() > 0)
}

pub(crate) fn nan_check_active() -> bool {
    NAN_CHECK.with(|c| c.get())
}

struct NoGradGuard;

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Run `f` without recording anything; nests fine.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = NoGradGuard;
    f()
}

struct NanCheckGuard(bool);

impl Drop for NanCheckGuard {
    fn drop(&mut self) {
        NAN_CHECK.with(|c| c.set(self.0));
    }
}

/// Run `f` with per-op output finiteness checks enabled; any op that
/// produces NaN/Inf fails with [`TensorError::NonFinite`] naming itself.
pub fn with_nan_check<R>(f: impl FnOnce() -> R) -> R {
    let prev = NAN_CHECK.with(|c| c.replace(true));
    let _guard = NanCheckGuard(prev);
    f()
}

/// Gradients keyed by tensor id, as produced by [`backward`].
pub struct Gradients<F: Scalar> {
    by_id: HashMap<TensorId, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.by_id.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros when the loss did not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor<F>) -> Vec<F> {
        self.by_id
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| vec![F::zero(); t.elem_count()])
    }

    pub fn contains(&self, t: &Tensor<F>) -> bool {
        self.by_id.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn axpy<F: Scalar>(acc: &mut [F], add: &[F]) {
    debug_assert_eq!(acc.len(), add.len());
    for (a, b) in acc.iter_mut().zip(add.iter()) {
        *a = *a + *b;
    }
}

/// Fill gradients of every trainable leaf reachable from `loss`.
///
/// The loss must be a scalar produced by recorded ops. Leaves created with
/// [`Tensor::param`] get their grad slot set and an entry in the returned
/// [`Gradients`]; everything intermediate is freed as the sweep passes it.
pub fn backward<F: Scalar>(loss: &Tensor<F>) -> Result<Gradients<F>> {
    if loss.elem_count() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if loss.op().is_none() {
        return Err(TensorError::InvalidArgument {
            op: "backward",
            msg: "loss was not produced by a recorded operation".into(),
        });
    }

    // Iterative post-order DFS: topological order over op-producing nodes.
    let mut topo: Vec<Tensor<F>> = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    let mut stack: Vec<(Tensor<F>, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child)) = stack.pop() {
        let inputs = node.op().map(|op| op.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((node, child + 1));
            if next.op().is_some() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            topo.push(node);
        }
    }

    let mut grads: HashMap<TensorId, Vec<F>> = HashMap::new();
    grads.insert(loss.id(), vec![F::one()]);

    let mut leaves: Vec<Tensor<F>> = Vec::new();
    let mut leaf_seen: HashSet<TensorId> = HashSet::new();

    for node in topo.iter().rev() {
        // Nodes the loss does not depend on never receive a gradient.
        let Some(grad_out) = grads.remove(&node.id()) else {
            continue;
        };
        let op = node.op().expect("topo contains only op nodes");
        let ctx = BackwardCtx {
            grad: &grad_out,
            inputs: &op.inputs,
            output_data: node.data(),
            output_shape: node.shape(),
        };
        let contribs = (op.backward)(&ctx);
        debug_assert_eq!(contribs.len(), op.inputs.len(), "{}: backward arity", op.name);
        for (input, contrib) in op.inputs.iter().zip(contribs.into_iter()) {
            let Some(contrib) = contrib else { continue };
            if !input.is_tracked() {
                continue;
            }
            debug_assert_eq!(
                contrib.len(),
                input.elem_count(),
                "{}: gradient length mismatch",
                op.name
            );
            match grads.entry(input.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => axpy(e.get_mut(), &contrib),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(contrib);
                }
            }
            if input.requires_grad() && input.op().is_none() && leaf_seen.insert(input.id()) {
                leaves.push(input.clone());
            }
        }
    }

    let mut by_id = HashMap::with_capacity(leaves.len());
    for leaf in leaves {
        if let Some(g) = grads.remove(&leaf.id()) {
            leaf.set_grad(g.clone());
            by_id.insert(leaf.id(), g);
        }
    }
    Ok(Gradients { by_id })
}
