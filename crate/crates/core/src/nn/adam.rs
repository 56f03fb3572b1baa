use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor2};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor2>,
    second: BTreeMap<String, Tensor2>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if !params.has_grads() {
            return Err(Error::InvalidInput("adam step before any gradient was computed".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.iter_mut() {
            let (r, c) = p.value.shape();
            let m = self.first.entry(name.to_string()).or_insert_with(|| Tensor2::zeros(r, c));
            let v = self.second.entry(name.to_string()).or_insert_with(|| Tensor2::zeros(r, c));
            if m.shape() != (r, c) {
                return Err(Error::Shape(format!("adam moments for {name:?} do not match the parameter")));
            }
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
