use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::{GradMap, ParamMap};

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub scale: f64,
    pub warmup_steps: usize,
    pub model_dim: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> Result<f64, TrainError> {
        if step == 0 {
            return Err(TrainError::InvalidArgument(
                "learning-rate steps start at 1".into(),
            ));
        }
        if self.warmup_steps == 0 || self.model_dim == 0 || !(self.scale > 0.0) {
            return Err(TrainError::InvalidArgument(format!(
                "invalid schedule {self:?}"
            )));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        Ok(self.scale * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: GradMap,
    v: GradMap,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: GradMap::new(),
            v: GradMap::new(),
        }
    }

    /// Updates every parameter; keys absent from `grads` see a zero gradient.
    pub fn step(&mut self, params: &mut ParamMap, grads: &GradMap, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (key, p) in params.iter_mut() {
            let n = p.len();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(key);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
