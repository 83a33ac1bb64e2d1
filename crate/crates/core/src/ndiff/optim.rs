//! Decoupled-weight-decay adaptive-moment optimizer.

use super::params::ParamStore;
use super::tensor::Tensor;

/// AdamW over a [`ParamStore`]. Moment buffers are keyed by parameter order,
/// so the store's structure must not change between steps.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value(i).shape().to_vec()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.value(i).shape().to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// Apply one update from the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = params.grad(i).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &gj) in g.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
            }
            let wd = lr * self.weight_decay;
            let value = params.value_mut(i);
            for (j, x) in value.data_mut().iter_mut().enumerate() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps) + wd * *x;
            }
        }
    }
}
