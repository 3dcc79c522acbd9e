use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moment buffers persist across steps.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        for b in [betas.0, betas.1] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("beta must lie in (0, 1), got {b}")));
            }
        }
        Ok(Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. `grads[i]` belongs to the i-th parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adamw", &[store.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let p = store.get_mut(super::params::ParamId(k));
            let w = p.value.data_mut();
            if g.len() != w.len() {
                return Err(Error::shape("adamw", &[w.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..w.len() {
                w[j] -= self.lr * self.weight_decay * w[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
