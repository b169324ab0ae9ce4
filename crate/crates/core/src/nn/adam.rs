use super::{ParamRef, Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter first/second moment buffers keyed by parameter
/// name, so optimizer state survives checkpointing.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step_count: 0, moments: BTreeMap::new() }
    }

    /// One update over all supplied parameters. Panics on non-finite
    /// gradients; the training loop screens those before stepping.
    pub fn step(&mut self, params: &mut [ParamRef<'_, T>]) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for p in params.iter_mut() {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(&p.value.shape), Tensor::zeros(&p.value.shape)));
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                debug_assert!(g.is_finite(), "non-finite gradient for {}", p.name);
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * g;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * g * g;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
