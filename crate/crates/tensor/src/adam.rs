use crate::error::{shape_err, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(config: AdamConfig, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Self {
        Self {
            config,
            first,
            second,
            step,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    store.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (param, g)) in store.values_mut().iter_mut().zip(grads.iter()).enumerate() {
            if param.shape() != g.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", param.shape(), g.shape()),
                ));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (p, gv)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Grads::zeros_like(&store);
        g.get_mut(id).data_mut()[0] = 1.0;
        adam.step(&mut store, &g).unwrap();
        assert_eq!(adam.step_count(), 1);
        assert!((adam.first_moments()[0].item() - 0.1).abs() < 1e-15);
        assert!((adam.second_moments()[0].item() - 0.001).abs() < 1e-15);
        let expected = -0.0003 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut store, id) = scalar_store(1.25);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Grads::zeros_like(&store);
        for _ in 0..3 {
            adam.step(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(id).item(), 1.25);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(&[0.3, -0.2])).unwrap();
        let b = store.add("b", Tensor::row(&[0.3, -0.2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Grads::zeros_like(&store);
        g.get_mut(a).data_mut().copy_from_slice(&[0.7, -1.1]);
        g.get_mut(b).data_mut().copy_from_slice(&[0.7, -1.1]);
        adam.step(&mut store, &g).unwrap();
        assert_eq!(store.get(a), store.get(b));
    }
}
