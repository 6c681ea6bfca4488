use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold.
    pub clip: f64,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, clip }
    }
}

/// First/second moment estimates for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

impl Adam {
    /// Clips and applies one update. Non-finite gradients leave both the
    /// parameters and the optimizer state untouched and return `Err(norm)`.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        state: &mut AdamState<T>,
        mut grads: Vec<Tensor<T>>,
    ) -> Result<f64, f64> {
        assert_eq!(grads.len(), store.len());
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(norm);
        }
        clip_global_norm(&mut grads, self.clip);
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::c(self.lr * bc2.sqrt() / bc1);
        let eps = T::c(self.eps * bc2.sqrt());
        for (id, g) in grads.iter().enumerate() {
            let p = store.get_mut(id);
            let m = &mut state.m[id].data;
            let v = &mut state.v[id].data;
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p.data[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
