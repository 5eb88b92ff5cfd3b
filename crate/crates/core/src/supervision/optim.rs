use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Linear warmup to `lr_max`, then half-cosine decay to zero at `total`.
pub fn lr_schedule(step: usize, lr_max: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        return if warmup >= total && step == total { lr_max } else { 0.0 };
    }
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in 64 bits.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// `decay[i]` selects which parameter tensors receive weight decay.
    pub fn new<F: Real>(cfg: AdamWConfig, params: &[Tensor<F>], decay: Vec<bool>) -> Self {
        assert_eq!(params.len(), decay.len(), "one decay flag per parameter");
        AdamW {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            decay,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<F: Real>(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim("adamw", "parameter and gradient lists differ"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let decay = if self.decay[k] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gv.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = F::from_f64(x);
            }
        }
        Ok(())
    }
}
