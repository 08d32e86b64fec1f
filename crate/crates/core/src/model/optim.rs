//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    /// Coordinates excluded from weight decay (e.g. biases).
    no_decay: Vec<bool>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, dim: usize) -> Self {
        AdamW { cfg, m: vec![0.0; dim], v: vec![0.0; dim], step: 0, no_decay: vec![false; dim] }
    }

    pub fn with_no_decay(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.m.len());
        self.no_decay = mask;
        self
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment estimates and step count, for checkpointing.
    pub fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::DimensionMismatch { what: "optimizer state", expected: self.m.len(), got: m.len() });
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update `w ← w − lr·(m̂/(√v̂+ε) + λ·w)`.
    pub fn step<T: Real>(&mut self, w: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(w.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..w.len() {
            let g = grad[i].as_f64();
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut wi = w[i].as_f64();
            if !self.no_decay[i] {
                wi -= lr * weight_decay * wi;
            }
            wi -= lr * mhat / (vhat.sqrt() + eps);
            w[i] = T::from_f64_lossy(wi);
        }
    }
}
