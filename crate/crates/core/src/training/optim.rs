use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Decoupled-weight-decay Adam over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients of frozen parameters are refused rather than applied;
    /// `decays` decides which parameters receive weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        decays: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (&id, g) in &grads.by_param {
            if !store.is_trainable(id) {
                return Err(Error::Training(format!(
                    "gradient for frozen parameter `{}`",
                    store.param(id).name()
                )));
            }
            let (rows, cols) = g.shape();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
            let decay = if decays(store.param(id).name()) {
                self.weight_decay
            } else {
                0.0
            };
            let mut value = store.value(id).clone();
            for (((w, gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
            store.set_value(id, value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("w", 1, 3, Init::Zeros, true, &mut rng).unwrap();
        let mut grads = Gradients::default();
        grads.by_param.insert(id, Matrix::from_rows(&[vec![2.0, -0.5, 0.0]]));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &grads, 0.01, |_| true).unwrap();
        let w = store.value(id);
        assert!((w.get(0, 0) + 0.01).abs() < 1e-8);
        assert!((w.get(0, 1) - 0.01).abs() < 1e-8);
        assert_eq!(w.get(0, 2), 0.0);
    }

    #[test]
    fn frozen_gradient_is_an_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("w", 1, 1, Init::Zeros, false, &mut rng).unwrap();
        let mut grads = Gradients::default();
        grads.by_param.insert(id, Matrix::filled(1, 1, 1.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        assert!(matches!(opt.step(&mut store, &grads, 0.1, |_| true), Err(Error::Training(_))));
    }
}
