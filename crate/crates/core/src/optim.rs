//! AdamW with decoupled weight decay and a linear-warmup schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 6e-5, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of every trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// treated as having a zero gradient (weight decay still applies).
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", store.name(*id))));
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let n = store.get(id).numel();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad = by_id[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64().unwrap_or(f64::NAN));
                let mi = c.beta1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - c.beta2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let pi = p[i].to_f64().unwrap_or(0.0);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * pi;
                p[i] = T::lit(pi - lr * update);
            }
        }
        Ok(())
    }
}

/// Constant learning rate after a linear warmup over `warmup` steps
/// (`step` is 0-based).
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(vec![1], v), true);
        (s, id)
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let (mut s, id) = store(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Tensor::zeros(vec![1]);
        for _ in 0..5 {
            opt.step(&mut s, &[(id, &g)], 1e-2).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn zero_grad_with_decay_shrinks() {
        let (mut s, id) = store(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let g = Tensor::zeros(vec![1]);
        opt.step(&mut s, &[(id, &g)], 0.5).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (mut s, id) = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = Tensor::full(vec![1], f64::NAN);
        assert!(matches!(opt.step(&mut s, &[(id, &g)], 1e-3), Err(Error::Numeric(_))));
        assert_eq!(s.get(id).data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(1.0, 0, 100), 0.01);
        assert_eq!(warmup_lr(1.0, 99, 100), 1.0);
        assert_eq!(warmup_lr(1.0, 500, 100), 1.0);
        assert_eq!(warmup_lr(0.5, 3, 0), 0.5);
    }
}
