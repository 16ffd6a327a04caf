//! Bias-corrected ADAM over a named parameter store, one instance per
//! optimized network, plus the stepped learning-rate schedule.

use std::collections::BTreeMap;

use crate::nn::ParameterStore;
use crate::tensor::{Gradients, Tensor};

use super::TrainError;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// First/second moment buffers keyed by parameter path.
#[derive(Default)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Vec<f32>, Vec<f32>))> {
        self.moments.iter()
    }

    pub fn restore(t: u64, moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>) -> Self {
        AdamState { t, moments }
    }
}

/// One update: `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Every parameter in the store must have a gradient.
pub fn adam_step(
    params: &ParameterStore<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    lr: f32,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, param) in params.iter() {
        let value = param.get();
        let g = grads
            .get(&value)
            .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let n = value.elem_count();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let mut next = value.to_vec();
        for i in 0..n {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
        param.set(Tensor::param(value.shape(), next).expect("same shape"));
    }
    Ok(())
}

/// Stepped schedule: the initial rate halves every `halving_epochs`.
pub fn lr_at(lr0: f64, halving_epochs: u64, epoch: u64) -> f64 {
    lr0 * 0.5f64.powi((epoch / halving_epochs.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::backward;

    fn store_with(name: &str, t: Tensor<f32>) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert(name, Param::new(t));
        s
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With constant gradient g, bias correction gives m_hat = g and
        // v_hat = g^2, so the first update is about -lr * sign(g).
        let store = store_with("w", Tensor::param(&[2], vec![1.0, -2.0]).unwrap());
        let p = store.get("w").unwrap().get();
        let loss = p
            .mul(&Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = backward(&loss).unwrap();
        let mut state = AdamState::new();
        adam_step(&store, &grads, &mut state, 0.1).unwrap();
        let updated = store.get("w").unwrap().get();
        assert!((updated.data()[0] - (1.0 - 0.1)).abs() < 1e-4);
        assert!((updated.data()[1] - (-2.0 + 0.1)).abs() < 1e-4);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let store = store_with("w", Tensor::param(&[2], vec![1.0, -2.0]).unwrap());
        let p = store.get("w").unwrap().get();
        let other = Tensor::<f32>::param(&[2], vec![5.0, 5.0]).unwrap();
        // Loss touches p with zero weight: gradient exists and is zero.
        let loss = p
            .mul(&Tensor::zeros(&[2]).unwrap())
            .unwrap()
            .add(&other)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = backward(&loss).unwrap();
        let before = store.get("w").unwrap().get().to_vec();
        adam_step(&store, &grads, &mut AdamState::new(), 0.1).unwrap();
        assert_eq!(store.get("w").unwrap().get().to_vec(), before);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let store = store_with("w", Tensor::param(&[1], vec![1.0]).unwrap());
        let unrelated = Tensor::<f32>::param(&[1], vec![2.0]).unwrap();
        let loss = unrelated.sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        let err = adam_step(&store, &grads, &mut AdamState::new(), 0.1).unwrap_err();
        assert!(matches!(err, TrainError::MissingGradient(_)));
    }

    #[test]
    fn descends_a_quadratic() {
        // Ten steps on f(theta) = theta^2 from theta = 1; |theta| must
        // shrink monotonically (scalar simulation checked by hand).
        let store = store_with("w", Tensor::param(&[1], vec![1.0]).unwrap());
        let mut state = AdamState::new();
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let p = store.get("w").unwrap().get();
            let loss = p.mul(&p).unwrap().sum_all().unwrap();
            let grads = backward(&loss).unwrap();
            adam_step(&store, &grads, &mut state, 0.1).unwrap();
            let now = store.get("w").unwrap().get().data()[0];
            assert!(now.abs() < prev.abs(), "{now} vs {prev}");
            prev = now;
        }
    }

    #[test]
    fn schedule_halves_every_interval() {
        assert_eq!(lr_at(1e-4, 30, 0), 1e-4);
        assert_eq!(lr_at(1e-4, 30, 29), 1e-4);
        assert_eq!(lr_at(1e-4, 30, 30), 5e-5);
        assert_eq!(lr_at(1e-4, 30, 60), 2.5e-5);
        // Four halvings by epoch 149.
        assert_eq!(lr_at(1e-4, 30, 149), 6.25e-6);
    }
}
