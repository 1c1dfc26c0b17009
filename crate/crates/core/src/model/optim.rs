use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ModelError, Scalar};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 4e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter for [`AdamW`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hparams: AdamW,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(hparams: AdamW, n_params: usize) -> Self {
        OptimizerState {
            hparams,
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    /// One AdamW update with decoupled weight decay applied to the coordinates in
    /// `decay` only. On error nothing is modified.
    pub fn step(&mut self, params: &mut [T], grads: &[T], decay: &[Range<usize>]) -> Result<(), ModelError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(ModelError::Shape(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient);
        }
        let h = self.hparams;
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - h.beta1), T::of(1.0 - h.beta2));
        let mut decays = vec![false; params.len()];
        for r in decay {
            decays[r.clone()].iter_mut().for_each(|d| *d = true);
        }
        let wd = h.lr * h.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
            let m_hat = self.m[i].as_f64() / bc1;
            let v_hat = self.v[i].as_f64() / bc2;
            let p = params[i].as_f64();
            let decay_term = if decays[i] { wd * p } else { 0.0 };
            params[i] = T::of(p - h.lr * m_hat / (v_hat.sqrt() + h.eps) - decay_term);
        }
        Ok(())
    }
}
