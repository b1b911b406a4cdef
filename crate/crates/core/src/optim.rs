//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    /// Parameters skipped so far because no gradient reached them.
    pub skipped: usize,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, skipped: 0 }
    }

    /// One update over every parameter holding a gradient, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for p in store.iter_mut() {
            let Some(grad) = p.grad.take() else {
                self.skipped += 1;
                continue;
            };
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for (((w, m), v), &g) in w
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(grad.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(vec![0.5, -2.0]));
        store.get_mut(p).grad = Some(Tensor::zeros(1, 2));
        Adam::default().step(&mut store);
        assert_eq!(store.value(p).data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0));
        store.get_mut(p).grad = Some(Tensor::scalar(1.0));
        let mut adam = Adam::default();
        adam.step(&mut store);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 3e-4 / (1.0 + 1e-8);
        assert!((store.value(p).item() - expected).abs() < 1e-15);
        assert!(store.get(p).grad.is_none());
        assert_eq!(store.get(p).step_count(), 1);
    }

    #[test]
    fn missing_gradient_is_skipped_and_counted() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0));
        let mut adam = Adam::default();
        adam.step(&mut store);
        assert_eq!(adam.skipped, 1);
        assert_eq!(store.value(p).item(), 1.0);
        assert_eq!(store.get(p).step_count(), 0);
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!(
            (c.learning_rate, c.beta1, c.beta2, c.epsilon),
            (3e-4, 0.9, 0.999, 1e-8)
        );
    }
}
