use candle_core::{Tensor, D};
use rand::Rng;

use super::params::{Init, Param, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.create(format!("{name}.weight"), &[out_dim, in_dim], init, rng)?;
        let bias = if bias {
            Some(store.create(format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::ShapeMismatch("scalar input".into()))?;
        let rows = x.elem_count() / in_dim.max(1);
        let w = self.weight.t();
        let mut y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.t())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = w.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.create(format!("{name}.weight"), &[dim], Init::Ones, rng)?,
            bias: store.create(format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.t())?
            .broadcast_add(&self.bias.t())?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, Init::Normal(0.02), rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, Init::Normal(0.02), rng)?,
            num_heads,
        })
    }

    /// Self-attention within each sequence of `x: (batch, tokens, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.num_heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax_last(&att)?;
        let out = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    /// `x * sigmoid(1.702 x)`, the CLIP variant.
    QuickGelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu_erf()?,
            Activation::QuickGelu => (x * sigmoid(&(x * 1.702)?)?)?,
        })
    }
}

/// Logistic function with the input clamped to +-30 so the exponent never overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-30.0, 30.0)?.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::Normal(0.02), rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, Init::Normal(0.02), rng)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}
