//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed: blending a procedural face clip and labelling its patches,
//! feature-statistics augmentation on a 2-D toy feature space, and ROC AUC of pasted scores.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use deepshield::data::{BlendMask, Frame, VideoClip};
use deepshield::dfa::{bfg_transform, channel_stats, dfg_transform, mix_stats};
use deepshield::patch::patch_labels;
use deepshield::sam::{temporal_artifact_generate, SamConfig};
use deepshield::synth::render_face_video;

/// A rendered face clip, its blended counterpart and the blend mask.
#[wasm_bindgen]
pub struct BlendDemo {
    original: Vec<Frame>,
    blended: Vec<Frame>,
    mask: BlendMask,
    params: String,
}

#[wasm_bindgen]
impl BlendDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, frames: usize) -> Result<BlendDemo, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
        let video = render_face_video("demo", frames, size, 0.01, &mut rng);
        let clip = VideoClip {
            frames: video.frames,
            source_id: "demo".into(),
            start_index: 0,
        };
        let out = temporal_artifact_generate(&clip, &video.landmarks, &SamConfig::default(), &mut rng)?;
        let params = serde_json::json!({
            "enhancement": out.enhancement,
            "mask": out.mask_params,
            "frame_strength": out.frame_strength,
        });
        Ok(BlendDemo {
            original: clip.frames,
            blended: out.clip.frames,
            mask: out.mask,
            params: params.to_string(),
        })
    }

    pub fn size(&self) -> usize {
        self.mask.height()
    }

    pub fn frames(&self) -> usize {
        self.original.len()
    }

    pub fn original_rgba(&self, t: usize) -> Vec<u8> {
        rgba(&self.original[t])
    }

    pub fn blended_rgba(&self, t: usize) -> Vec<u8> {
        rgba(&self.blended[t])
    }

    pub fn mask_rgba(&self, t: usize) -> Vec<u8> {
        self.mask
            .frame(t)
            .iter()
            .flat_map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }

    /// Labels of frame `t` on a `grid x grid` patch grid: 1 where at least `theta` mask
    /// pixels of the patch are non-zero.
    pub fn patch_labels(&self, t: usize, grid: usize, theta: usize) -> Result<Vec<u8>, JsError> {
        let p = grid * grid;
        let labels = patch_labels(&self.mask, p, theta)?;
        Ok(labels.labels[t * p..(t + 1) * p].to_vec())
    }

    pub fn params_json(&self) -> String {
        self.params.clone()
    }
}

fn rgba(frame: &Frame) -> Vec<u8> {
    frame
        .pixels()
        .chunks(3)
        .flat_map(|p| {
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(p[0]), q(p[1]), q(p[2]), 255]
        })
        .collect()
}

fn cloud(n: usize, mean: [f64; 2], std: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .flat_map(|_| [mean[0] + std[0] * z.sample(rng), mean[1] + std[1] * z.sample(rng)])
        .collect()
}

/// Two point clouds standing in for the features of two forgery domains, plus the first
/// domain re-normalized toward mixed statistics (weight `lambda` on its own) and expanded
/// away from its mean by `alpha`. Returns JSON `{a, b, dfg, bfg}` of `[x, y]` pairs.
#[wasm_bindgen]
pub fn dfa_scatter(seed: u32, points: usize, lambda: f64, alpha: f64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let a = cloud(points, [-1.0, 0.5], [0.35, 0.2], &mut rng);
    let b = cloud(points, [1.2, -0.4], [0.2, 0.6], &mut rng);
    let to_t = |v: &[f64]| Tensor::from_slice(v, (points, 2), &Device::Cpu);
    let (ta, tb) = (to_t(&a)?, to_t(&b)?);
    let (sa, sb) = (channel_stats(&ta)?, channel_stats(&tb)?);
    let dfg = dfg_transform(&ta, &sa, &mix_stats(&sa, &sb, lambda)?)?;
    let bfg = bfg_transform(&ta, &sa, alpha)?;
    let pairs = |t: &Tensor| -> Result<Vec<Vec<f64>>, JsError> { Ok(t.to_vec2::<f64>()?) };
    let out = serde_json::json!({
        "a": pairs(&ta)?,
        "b": pairs(&tb)?,
        "dfg": pairs(&dfg)?,
        "bfg": pairs(&bfg)?,
    });
    Ok(out.to_string())
}

/// ROC AUC with fake (`labels[i] == 1`) as the positive class.
#[wasm_bindgen]
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, JsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    Ok(deepshield::eval::auc(scores, &labels)?)
}
