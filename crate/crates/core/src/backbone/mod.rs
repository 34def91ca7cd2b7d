//! Video encoder: a ViT applied frame by frame, with spatio-temporal adapters before the
//! attention and MLP of every block, plus the patch and clip classifier heads.
//!
//! Spatial attention never crosses frames; information moves between frames only through
//! the adapters' temporal convolutions.

mod adapter;
pub mod checkpoint;
mod layers;
mod params;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{ClsMode, StAdapter};
pub use layers::{sigmoid, softmax_last, Activation, Attention, LayerNorm, Linear, Mlp};
pub use params::{Init, Param, ParamStore};

use crate::data::VideoClip;
use crate::error::{Error, Result};

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMode {
    /// Adapters and heads only when pretrained weights are loaded, everything otherwise.
    Auto,
    AdaptersOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Name of the preset the remaining keys default to.
    pub preset: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub adapter_bottleneck: usize,
    /// Clip length `T`.
    pub num_frames: usize,
    pub adapter_cls_mode: ClsMode,
    pub mlp_activation: Activation,
    pub trainable: TrainableMode,
    /// Also train layer norms when the backbone is frozen.
    pub train_layer_norms: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_b16()
    }
}

impl EncoderConfig {
    /// ViT-B/16 at 224 px with 12-frame clips and 384-wide adapters.
    pub fn vit_b16() -> Self {
        Self {
            preset: "vit_b16".into(),
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            adapter_bottleneck: 384,
            num_frames: 12,
            adapter_cls_mode: ClsMode::Temporal,
            mlp_activation: Activation::QuickGelu,
            trainable: TrainableMode::Auto,
            train_layer_norms: false,
            pretrained_weights: None,
        }
    }

    /// Desk-scale preset: 64 px frames, 8 px patches, 6-frame clips.
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            adapter_bottleneck: 64,
            num_frames: 6,
            adapter_cls_mode: ClsMode::Temporal,
            mlp_activation: Activation::Gelu,
            trainable: TrainableMode::Auto,
            train_layer_norms: false,
            pretrained_weights: None,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "vit_b16" => Some(Self::vit_b16()),
            _ => None,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| Err(Error::config(format!("encoder.{key}"), reason));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(
                "image_size",
                format!("{} is not divisible by patch size {}", self.image_size, self.patch_size),
            );
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(
                "num_heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads),
            );
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.embed_dim {
            return fail(
                "adapter_bottleneck",
                format!("must be in 1..{}, got {}", self.embed_dim, self.adapter_bottleneck),
            );
        }
        if self.depth == 0 || self.num_frames == 0 || self.mlp_ratio == 0 {
            return fail("depth", "depth, num_frames and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of clips.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    /// `(batch, T, C)`
    pub class_embeddings: Tensor,
    /// `(batch, T, P, C)`
    pub patch_embeddings: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Patch,
    Clip,
}

#[derive(Debug, Clone)]
struct Block {
    adapter_attn: StAdapter,
    ln_1: LayerNorm,
    attn: Attention,
    adapter_mlp: StAdapter,
    ln_2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let x = self.adapter_attn.forward(x, frames)?;
        let x = (&x + self.attn.forward(&self.ln_1.forward(&x)?)?)?;
        let x = self.adapter_mlp.forward(&x, frames)?;
        Ok((&x + self.mlp.forward(&self.ln_2.forward(&x)?)?)?)
    }
}

/// Encoder plus heads. Parameters live in a [`ParamStore`] under stable names:
///
/// ```text
/// encoder.patch_embed.weight            (C, patch*patch*3), input ordered (row, col, rgb)
/// encoder.cls_token                     (C)
/// encoder.pos_embed                     (1 + P, C)
/// encoder.ln_pre.{weight,bias}
/// encoder.blocks.{i}.adapter_attn.{down,up}.{weight,bias}, .conv.{weight,bias}
/// encoder.blocks.{i}.ln_1 / attn.qkv / attn.proj / adapter_mlp / ln_2 / mlp.fc1 / mlp.fc2
/// encoder.ln_post.{weight,bias}
/// heads.patch.{weight,bias}             (2, C)
/// heads.clip.{weight,bias}              (2, C)
/// ```
#[derive(Debug, Clone)]
pub struct DeepShieldModel {
    config: EncoderConfig,
    store: ParamStore,
    patch_embed: Linear,
    cls_token: Param,
    pos_embed: Param,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    patch_head: Linear,
    clip_head: Linear,
}

impl DeepShieldModel {
    /// Randomly initialized model: adapters start as the identity, heads at zero.
    pub fn new(config: EncoderConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new(dtype, device.clone());
        let c = config.embed_dim;
        let s = &mut store;
        let patch_embed = Linear::new(s, "encoder.patch_embed", config.patch_dim(), c, false, Init::Normal(0.02), rng)?;
        let cls_token = s.create("encoder.cls_token", &[c], Init::Normal(0.02), rng)?;
        let pos_embed = s.create("encoder.pos_embed", &[config.num_patches() + 1, c], Init::Normal(0.02), rng)?;
        let ln_pre = LayerNorm::new(s, "encoder.ln_pre", c, rng)?;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                Ok(Block {
                    adapter_attn: StAdapter::new(s, &format!("{p}.adapter_attn"), c, config.adapter_bottleneck, config.adapter_cls_mode, rng)?,
                    ln_1: LayerNorm::new(s, &format!("{p}.ln_1"), c, rng)?,
                    attn: Attention::new(s, &format!("{p}.attn"), c, config.num_heads, rng)?,
                    adapter_mlp: StAdapter::new(s, &format!("{p}.adapter_mlp"), c, config.adapter_bottleneck, config.adapter_cls_mode, rng)?,
                    ln_2: LayerNorm::new(s, &format!("{p}.ln_2"), c, rng)?,
                    mlp: Mlp::new(s, &format!("{p}.mlp"), c, c * config.mlp_ratio, config.mlp_activation, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::new(s, "encoder.ln_post", c, rng)?;
        let patch_head = Linear::new(s, "heads.patch", c, 2, true, Init::Zeros, rng)?;
        let clip_head = Linear::new(s, "heads.clip", c, 2, true, Init::Zeros, rng)?;
        let model = Self {
            config,
            store,
            patch_embed,
            cls_token,
            pos_embed,
            ln_pre,
            blocks,
            ln_post,
            patch_head,
            clip_head,
        };
        model.apply_trainable_mode(false);
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Sets trainable flags from the configured mode. `pretrained` resolves [`TrainableMode::Auto`].
    pub fn apply_trainable_mode(&self, pretrained: bool) {
        let frozen_backbone = match self.config.trainable {
            TrainableMode::Full => false,
            TrainableMode::AdaptersOnly => true,
            TrainableMode::Auto => pretrained,
        };
        let train_ln = self.config.train_layer_norms;
        self.store.set_trainable(|name| {
            !frozen_backbone
                || name.starts_with("heads.")
                || name.contains(".adapter_")
                || (train_ln && name.contains(".ln_"))
        });
    }

    /// Fraction of scalar parameters that receive gradients.
    pub fn trainable_fraction(&self) -> f64 {
        let (t, all) = self.store.counts();
        t as f64 / all.max(1) as f64
    }

    /// Converts clips to the encoder input `(batch, T, P, patch*patch*3)`.
    pub fn clips_to_input(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        clips_to_patches(clips, &self.config, self.dtype(), self.device())
    }

    /// Encodes patchified clips `(batch, T, P, patch_dim)`.
    pub fn encode(&self, input: &Tensor) -> Result<ClipFeatures> {
        let (b, t, p, d) = input.dims4()?;
        let cfg = &self.config;
        if t != cfg.num_frames || p != cfg.num_patches() || d != cfg.patch_dim() {
            return Err(Error::ConfigMismatch(format!(
                "input (T={t}, P={p}, dim={d}) does not match encoder (T={}, P={}, dim={})",
                cfg.num_frames,
                cfg.num_patches(),
                cfg.patch_dim()
            )));
        }
        let c = cfg.embed_dim;
        let tokens = self.patch_embed.forward(&input.reshape((b * t, p, d))?)?;
        let cls = self.cls_token.t().reshape((1, 1, c))?.broadcast_as((b * t, 1, c))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed.t())?;
        let mut x = self.ln_pre.forward(&x)?;
        for block in &self.blocks {
            x = block.forward(&x, t)?;
        }
        let x = self.ln_post.forward(&x)?.reshape((b, t, p + 1, c))?;
        Ok(ClipFeatures {
            class_embeddings: x.narrow(2, 0, 1)?.squeeze(2)?,
            patch_embeddings: x.narrow(2, 1, p)?,
        })
    }

    /// Encodes a single clip; outputs are `(T, C)` and `(T, P, C)`.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<ClipFeatures> {
        let f = self.encode(&self.clips_to_input(&[clip])?)?;
        Ok(ClipFeatures {
            class_embeddings: f.class_embeddings.squeeze(0)?,
            patch_embeddings: f.patch_embeddings.squeeze(0)?,
        })
    }

    /// Fake-class probability of a 2-way softmax head, for features `(..., C)`.
    pub fn classify(&self, features: &Tensor, head: Head) -> Result<Tensor> {
        let head = match head {
            Head::Patch => &self.patch_head,
            Head::Clip => &self.clip_head,
        };
        let logits = head.forward(features)?;
        let last = logits.rank() - 1;
        let diff = (logits.narrow(last, 1, 1)? - logits.narrow(last, 0, 1)?)?.squeeze(last)?;
        sigmoid(&diff)
    }

    /// Loads parameters by name from a safetensors file. Returns how many were loaded.
    /// Names may use this model's layout or the OpenAI CLIP visual-encoder layout.
    pub fn load_pretrained(&self, path: &std::path::Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut loaded = 0;
        for (name, tensor) in &tensors {
            let (target, value) = match map_clip_name(name, tensor, &self.config)? {
                Some(pairs) => {
                    for (n, v) in &pairs {
                        self.store.assign(n, v)?;
                        loaded += 1;
                    }
                    continue;
                }
                None => (name.clone(), tensor.clone()),
            };
            if self.store.get(&target).is_some() {
                self.store.assign(&target, &value)?;
                loaded += 1;
            }
        }
        self.apply_trainable_mode(loaded > 0);
        Ok(loaded)
    }
}

/// Maps an OpenAI CLIP visual tensor name onto this model's parameters.
fn map_clip_name(name: &str, t: &Tensor, cfg: &EncoderConfig) -> Result<Option<Vec<(String, Tensor)>>> {
    let name = name.strip_prefix("visual.").unwrap_or(name);
    let c = cfg.embed_dim;
    let simple = |n: &str| Ok(Some(vec![(n.to_string(), t.clone())]));
    match name {
        "conv1.weight" => {
            // (C, 3, p, p) -> (C, p, p, 3)
            let w = t.permute((0, 2, 3, 1))?.contiguous()?.reshape((c, cfg.patch_dim()))?;
            return Ok(Some(vec![("encoder.patch_embed.weight".into(), w)]));
        }
        "class_embedding" => return simple("encoder.cls_token"),
        "positional_embedding" => return simple("encoder.pos_embed"),
        "ln_pre.weight" => return simple("encoder.ln_pre.weight"),
        "ln_pre.bias" => return simple("encoder.ln_pre.bias"),
        "ln_post.weight" => return simple("encoder.ln_post.weight"),
        "ln_post.bias" => return simple("encoder.ln_post.bias"),
        _ => {}
    }
    let Some(rest) = name.strip_prefix("transformer.resblocks.") else {
        return Ok(None);
    };
    let Some((idx, field)) = rest.split_once('.') else {
        return Ok(None);
    };
    let p = format!("encoder.blocks.{idx}");
    let target = match field {
        "attn.in_proj_weight" => "attn.qkv.weight",
        "attn.in_proj_bias" => "attn.qkv.bias",
        "attn.out_proj.weight" => "attn.proj.weight",
        "attn.out_proj.bias" => "attn.proj.bias",
        "ln_1.weight" | "ln_1.bias" | "ln_2.weight" | "ln_2.bias" => field,
        "mlp.c_fc.weight" => "mlp.fc1.weight",
        "mlp.c_fc.bias" => "mlp.fc1.bias",
        "mlp.c_proj.weight" => "mlp.fc2.weight",
        "mlp.c_proj.bias" => "mlp.fc2.bias",
        _ => return Ok(None),
    };
    simple(&format!("{p}.{target}"))
}

/// Patchifies clips into `(batch, T, P, patch*patch*3)`, patches row-major over the grid,
/// each patch flattened as (row, col, rgb).
pub fn clips_to_patches(
    clips: &[&VideoClip],
    cfg: &EncoderConfig,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (t, size, ps) = (cfg.num_frames, cfg.image_size, cfg.patch_size);
    let g = size / ps;
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(clips.len() * t * g * g * pd);
    for clip in clips {
        if clip.len() != t {
            return Err(Error::ConfigMismatch(format!(
                "clip {} has {} frames, encoder expects {t}",
                clip.source_id,
                clip.len()
            )));
        }
        for frame in &clip.frames {
            if frame.height() != size || frame.width() != size {
                return Err(Error::ConfigMismatch(format!(
                    "frame {}x{} does not match encoder image size {size}",
                    frame.height(),
                    frame.width()
                )));
            }
            let px = frame.pixels();
            for gr in 0..g {
                for gc in 0..g {
                    for r in gr * ps..(gr + 1) * ps {
                        let row = (r * size + gc * ps) * 3;
                        data.extend_from_slice(&px[row..row + ps * 3]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (clips.len(), t, g * g, pd), device)?.to_dtype(dtype)?)
}
