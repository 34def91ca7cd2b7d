use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::ParamStore;
use crate::error::{Error, Result};

/// Adam with L2 weight decay added to the gradient (not decoupled).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. Returns the global L2 norm of
    /// the raw gradients.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut sq_norm = 0.0;
        for (name, p) in params.trainable() {
            let Some(g) = grads.get(p.var().as_tensor()) else {
                continue;
            };
            let theta = p.var().as_tensor().detach();
            sq_norm += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let g = (g.detach() + (&theta * self.weight_decay)?)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + self.eps)?)?;
            p.var().set(&(theta - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(sq_norm.sqrt())
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            lr: self.lr,
        }
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`.
    pub fn moments(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.m
            .iter()
            .map(|(n, t)| (format!("optim.m.{n}"), t))
            .chain(self.v.iter().map(|(n, t)| (format!("optim.v.{n}"), t)))
    }

    pub fn restore(&mut self, state: &AdamState, tensors: &std::collections::HashMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        self.step = state.step;
        self.lr = state.lr;
        self.m.clear();
        self.v.clear();
        for (key, t) in tensors {
            let (map, name) = if let Some(n) = key.strip_prefix("optim.m.") {
                (&mut self.m, n)
            } else if let Some(n) = key.strip_prefix("optim.v.") {
                (&mut self.v, n)
            } else {
                continue;
            };
            let p = params
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("optimizer state for unknown parameter {name}")))?;
            map.insert(name.to_string(), t.to_dtype(p.var().dtype())?.to_device(p.var().device())?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
}

/// Cosine decay from `base` at step 0 to exactly 0 at step `total - 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let s = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * s).cos())
}
