use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, one entry per parameter in store order.
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self {
            config,
            step: 0,
            first: params.iter().map(|(_, t)| zeros(t)).collect(),
            second: params.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    ///
    /// Parameters without a gradient still receive weight decay. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<(), AutodiffError> {
        assert_eq!(self.first.len(), params.len(), "optimizer built for a different parameter set");
        for (name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(AutodiffError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, decay) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let tensor = params.get_mut(id);
            let grad = tensor.grad().map(<[T]>::to_vec);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
