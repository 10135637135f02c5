use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction. Moments are kept in
/// f32 so a checkpoint captures the optimizer exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore<f32>) -> Self {
        let zeros = |id| Tensor::zeros(store.get(id).shape());
        Self { cfg, t: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }

    /// One update from per-parameter gradients (in store order).
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, &g) in grads[i].iter().enumerate() {
                let mk = c.beta1 * m[k] as f64 + (1.0 - c.beta1) * g;
                let vk = c.beta2 * v[k] as f64 + (1.0 - c.beta2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                p[k] = (p[k] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
