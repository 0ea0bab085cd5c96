//! Adam with bias correction.

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moment estimates, one buffer pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on `store`. Tensors without
    /// a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
