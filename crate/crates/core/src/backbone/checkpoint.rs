//! Checkpoints are safetensors files. Model tensors are stored as `model.<param>`, optimizer
//! moments as `optim.m.<param>` and `optim.v.<param>`; the resolved config and trainer
//! state go in the header metadata as JSON strings.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use super::DeepShieldModel;
use crate::error::{Error, Result};

const FORMAT: &str = "deepshield-checkpoint";
const VERSION: &str = "1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: HashMap<String, Tensor>,
    /// Resolved run config, serialized as JSON.
    pub config: String,
    /// Trainer state (step, epoch, rng position), serialized as JSON.
    pub state: String,
}

impl Checkpoint {
    pub fn from_model(model: &DeepShieldModel, config: String, state: String) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(n, p)| (format!("model.{n}"), p.var().as_tensor().detach()))
            .collect();
        Self {
            tensors,
            config,
            state,
        }
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.tensors.insert(name, t.detach());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("config".to_string(), self.config.clone());
        meta.insert("state".to_string(), self.state.clone());
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let views: Vec<(String, TensorBytes)> = names
            .into_iter()
            .map(|n| Ok((n.clone(), TensorBytes::new(&self.tensors[n])?)))
            .collect::<Result<_>>()?;
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not a deepshield checkpoint".into()));
        }
        if meta.get("version").map(String::as_str) != Some(VERSION) {
            return Err(bad(format!("unsupported version {:?}", meta.get("version"))));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Self {
            tensors,
            config: meta.get("config").cloned().unwrap_or_default(),
            state: meta.get("state").cloned().unwrap_or_default(),
        })
    }

    /// Copies `model.*` tensors into the model; every model parameter must be present.
    pub fn restore_model(&self, model: &DeepShieldModel) -> Result<()> {
        for (name, _) in model.params().iter() {
            let t = self.tensors.get(&format!("model.{name}")).ok_or_else(|| {
                Error::ConfigMismatch(format!("checkpoint lacks parameter {name}"))
            })?;
            model.params().assign(name, t).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        }
        Ok(())
    }
}

/// Owned little-endian bytes of a tensor, for safetensors serialization.
struct TensorBytes {
    dtype: safetensors::Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorBytes {
    fn new(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let (dtype, data) = match t.dtype() {
            candle_core::DType::F64 => (
                safetensors::Dtype::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                safetensors::Dtype::F32,
                flat.to_dtype(candle_core::DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        Ok(Self { dtype, shape, data })
    }
}

impl safetensors::View for TensorBytes {
    fn dtype(&self) -> safetensors::Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}
