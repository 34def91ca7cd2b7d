use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A named model parameter. Frozen parameters are handed out detached so no gradient is
/// computed for them.
#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        !self.frozen.load(Ordering::Relaxed)
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("shape", self.var.shape())
            .field("trainable", &self.is_trainable())
            .finish()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Ordered registry of every parameter in a model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Param> {
        let name = name.into();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config(&name, e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let param = Param {
            var: Var::from_tensor(&tensor)?,
            frozen: Arc::new(AtomicBool::new(false)),
        };
        if self.params.insert(name.clone(), param.clone()).is_some() {
            return Err(Error::ShapeMismatch(format!("duplicate parameter {name}")));
        }
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks each parameter trainable or frozen according to `trainable(name)`.
    pub fn set_trainable(&self, trainable: impl Fn(&str) -> bool) {
        for (name, p) in &self.params {
            p.frozen.store(!trainable(name), Ordering::Relaxed);
        }
    }

    pub fn trainable(&self) -> Vec<(&String, &Param)> {
        self.params.iter().filter(|(_, p)| p.is_trainable()).collect()
    }

    /// `(trainable, total)` scalar parameter counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.values().fold((0, 0), |(t, all), p| {
            let n = p.elem_count();
            (t + if p.is_trainable() { n } else { 0 }, all + n)
        })
    }

    /// Overwrites a parameter's value; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        if p.var.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var
            .set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}
