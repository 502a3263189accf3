use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet};
use crate::{Error, Real, Result};

/// `peak * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moments with one step counter per tensor, so tensors that joined training
/// late (or were frozen for a while) get their own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: vec![0; params.len()],
        }
    }

    /// Update every tensor that has a gradient and for which `lr` returns a rate.
    pub fn update(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &Gradients<T>,
        lr: impl Fn(usize) -> Option<f64>,
    ) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for id in 0..params.len() {
            let (Some(g), Some(rate)) = (grads.get(id), lr(id)) else {
                continue;
            };
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let m = self.m.tensor_mut(id);
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
            let v = self.v.tensor_mut(id);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let step = T::of(rate / c1);
            let (sc2, e) = (T::of(c2.sqrt()), T::of(eps));
            ndarray::Zip::from(params.tensor_mut(id))
                .and(self.m.tensor(id))
                .and(self.v.tensor(id))
                .for_each(|p, &m, &v| *p -= step * m / (v.sqrt() / sc2 + e));
        }
    }
}
