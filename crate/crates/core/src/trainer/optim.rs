use serde::{Deserialize, Serialize};

use crate::diffengine::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Cosine decay from `lr0` at step 0 to exactly 0 at `total - 1`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let x = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()))?;
            v.insert(name, Tensor::zeros(t.shape()))?;
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        })
    }

    /// One bias-corrected update; `grads` pairs parameter names with gradients.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.data_mut(name)?;
            if p.len() != g.data().len() {
                return Err(Error::Shape(format!("gradient of `{name}` has the wrong size")));
            }
            let m = self.m.data_mut(name)?;
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.data_mut(name)?;
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?.data(), self.v.get(name)?.data());
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
