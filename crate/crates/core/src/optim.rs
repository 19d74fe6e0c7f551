//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Apply one update. A zero learning rate leaves parameters untouched
    /// bit-for-bit (moments still advance).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let wd = T::from_f64(c.weight_decay);
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        let skip_update = c.lr == 0.0;
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + wd * *w;
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                if !skip_update {
                    *w -= step_size * m[j] / ((v[j]).sqrt() * inv_sqrt_bc2 + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..500 {
            let g = store.tensors()[0].map(|v| 2.0 * v);
            opt.step(&mut store, &[g]);
        }
        assert!(store.tensors()[0].data().iter().all(|v| v.abs() < 1e-2));
    }
}
