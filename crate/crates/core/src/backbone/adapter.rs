use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Linear};
use super::params::{Init, Param, ParamStore};
use crate::error::{Error, Result};

/// How the class token passes through the adapter's temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// Three-tap temporal convolution, as for any patch token (a 1x1 spatial grid).
    Temporal,
    /// Centre tap only: no mixing across frames.
    Bypass,
}

/// Spatio-temporal adapter:
/// `x + gelu(dwconv_t(x W_down)) W_up`, where `dwconv_t` is a depthwise convolution with a
/// 3x1x1 kernel over (time, height, width), zero-padded in time. Each token position is
/// convolved with its own position in the neighbouring frames.
#[derive(Debug, Clone)]
pub struct StAdapter {
    down: Linear,
    up: Linear,
    conv_weight: Param,
    conv_bias: Param,
    cls_mode: ClsMode,
}

impl StAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        bottleneck: usize,
        cls_mode: ClsMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), dim, bottleneck, true, Init::Normal(0.02), rng)?,
            up: Linear::new(store, &format!("{name}.up"), bottleneck, dim, true, Init::Zeros, rng)?,
            conv_weight: store.create(
                format!("{name}.conv.weight"),
                &[bottleneck, 3],
                Init::Uniform(1.0 / 3f64.sqrt()),
                rng,
            )?,
            conv_bias: store.create(format!("{name}.conv.bias"), &[bottleneck], Init::Zeros, rng)?,
            cls_mode,
        })
    }

    fn tap(&self, k: usize) -> Result<Tensor> {
        Ok(self.conv_weight.t().narrow(1, k, 1)?.squeeze(1)?)
    }

    /// Depthwise temporal convolution of `h: (batch, frames, tokens, channels)`.
    fn temporal_conv(&self, h: &Tensor) -> Result<Tensor> {
        let (_, t, n, _) = h.dims4()?;
        let padded = h.pad_with_zeros(1, 1, 1)?;
        let mut out = padded.narrow(1, 0, t)?.broadcast_mul(&self.tap(0)?)?;
        out = (out + padded.narrow(1, 1, t)?.broadcast_mul(&self.tap(1)?)?)?;
        out = (out + padded.narrow(1, 2, t)?.broadcast_mul(&self.tap(2)?)?)?;
        out = out.broadcast_add(&self.conv_bias.t())?;
        if self.cls_mode == ClsMode::Bypass && n > 1 {
            let cls = h
                .narrow(2, 0, 1)?
                .broadcast_mul(&self.tap(1)?)?
                .broadcast_add(&self.conv_bias.t())?;
            out = Tensor::cat(&[&cls, &out.narrow(2, 1, n - 1)?], 2)?;
        }
        Ok(out)
    }

    /// `x: (batch * frames, tokens, dim)`, frames of one clip stored contiguously.
    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (bt, n, _) = x.dims3()?;
        if frames == 0 || bt % frames != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{bt} sequences cannot be split into clips of {frames} frames"
            )));
        }
        let h = self.down.forward(x)?;
        let c = h.dim(2)?;
        let h = h.reshape((bt / frames, frames, n, c))?;
        let h = Activation::Gelu.apply(&self.temporal_conv(&h)?)?;
        let h = h.reshape((bt, n, c))?;
        Ok((x + self.up.forward(&h)?)?)
    }

    /// Single clip, `x: (frames, tokens, dim)`.
    pub fn forward_clip(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        self.forward(x, t)
    }
}
