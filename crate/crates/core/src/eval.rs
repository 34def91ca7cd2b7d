//! Video-level inference, ROC AUC, and patch-probability heatmaps.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{DeepShieldModel, Head};
use crate::data::{sample_inference_clips, Frame, Label, Video, VideoClip};
use crate::error::{Error, Result};
use crate::losses::global_clip_feature;
use crate::patch::patch_labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    Jet,
    Gray,
}

impl Colormap {
    pub fn color(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v; 3],
            Colormap::Jet => {
                let ch = |offset: f32| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
                [ch(3.0), ch(2.0), ch(1.0)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Opacity of the heatmap over the frame.
    pub heatmap_alpha: f32,
    pub colormap: Colormap,
    /// Inference clips encoded per forward pass.
    pub clip_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heatmap_alpha: 0.5,
            colormap: Colormap::Jet,
            clip_batch: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.heatmap_alpha) {
            return Err(Error::config(
                "eval.heatmap_alpha",
                format!("must be in [0, 1], got {}", self.heatmap_alpha),
            ));
        }
        if self.clip_batch == 0 {
            return Err(Error::config("eval.clip_batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub clip_probs: Vec<f64>,
    pub video_prob: f64,
    pub label: Label,
}

impl VideoPrediction {
    pub fn from_clip_probs(video_id: impl Into<String>, clip_probs: Vec<f64>, label: Label) -> Self {
        let video_prob = clip_probs.iter().sum::<f64>() / clip_probs.len().max(1) as f64;
        Self {
            video_id: video_id.into(),
            clip_probs,
            video_prob,
            label,
        }
    }
}

/// Fake probability of each clip from the clip head on its frame-averaged class embedding.
pub fn clip_probs(model: &DeepShieldModel, clips: &[VideoClip], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let refs: Vec<&VideoClip> = chunk.iter().collect();
        let f = model.encode(&model.clips_to_input(&refs)?)?;
        let p = model.classify(&global_clip_feature(&f.class_embeddings)?, Head::Clip)?;
        out.extend(p.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Averages the clip probabilities of the four inference clips.
pub fn predict_video(model: &DeepShieldModel, video: &Video, config: &EvalConfig) -> Result<VideoPrediction> {
    let clips = sample_inference_clips(video, model.config().num_frames)?;
    let probs = clip_probs(model, &clips, config.clip_batch)?;
    Ok(VideoPrediction::from_clip_probs(&video.record.video_id, probs, video.label()))
}

/// ROC AUC of `scores` against binary labels (`true` = positive) via the rank statistic,
/// ties receiving half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tied run shares its average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Video-level AUC over predictions, fake as the positive class.
pub fn video_auc(predictions: &[VideoPrediction]) -> Result<f64> {
    let scores: Vec<f64> = predictions.iter().map(|p| p.video_prob).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label.is_fake()).collect();
    auc(&scores, &labels)
}

/// Patch fake-probabilities `(T, P)` for one clip.
pub fn patch_probs(model: &DeepShieldModel, clip: &VideoClip) -> Result<Tensor> {
    let f = model.encode_clip(clip)?;
    model.classify(&f.patch_embeddings, Head::Patch)
}

/// Patch probabilities and labels over a video's inference clips, using its stored blend
/// masks. Returns `None` for videos without masks.
pub fn patch_scores(model: &DeepShieldModel, video: &Video, theta: usize) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
    if !video.has_masks() {
        return Ok(None);
    }
    let t = model.config().num_frames;
    let p = model.config().num_patches();
    let clips = sample_inference_clips(video, t)?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for clip in &clips {
        let mask = video
            .clip_mask(clip.start_index, t)?
            .expect("video has masks");
        labels.extend(patch_labels(&mask, p, theta)?.labels.iter().map(|&l| l == 1));
        let probs = patch_probs(model, clip)?;
        scores.extend(probs.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(Some((scores, labels)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerVideo {
    pub video_id: String,
    pub video_prob: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub n_videos: usize,
    pub per_video: Vec<PerVideo>,
    /// Patch-level AUC over videos with stored masks, when any have both patch classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_auc: Option<f64>,
}

/// Predicts every video and computes video-level AUC, plus patch AUC where masks exist.
pub fn evaluate(model: &DeepShieldModel, videos: &[Video], config: &EvalConfig, theta: usize) -> Result<EvalReport> {
    let predictions = videos
        .iter()
        .map(|v| predict_video(model, v, config))
        .collect::<Result<Vec<_>>>()?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for v in videos {
        if let Some((s, l)) = patch_scores(model, v, theta)? {
            scores.extend(s);
            labels.extend(l);
        }
    }
    Ok(EvalReport {
        auc: video_auc(&predictions)?,
        n_videos: predictions.len(),
        per_video: predictions
            .into_iter()
            .map(|p| PerVideo {
                video_id: p.video_id,
                video_prob: p.video_prob,
                label: p.label,
            })
            .collect(),
        patch_auc: auc(&scores, &labels).ok(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeatmapJson {
    source_id: String,
    start_index: usize,
    frames: usize,
    grid: [usize; 2],
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HeatmapOutput {
    pub frames: Vec<PathBuf>,
    pub json: PathBuf,
}

/// Overlays a patch-probability grid on a frame, each probability filling its patch.
pub fn overlay(frame: &Frame, probs: &[f64], grid: usize, config: &EvalConfig) -> RgbImage {
    let (h, w) = (frame.height(), frame.width());
    let a = config.heatmap_alpha;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let cell = (r * grid / h) * grid + c * grid / w;
        let heat = config.colormap.color(probs[cell] as f32);
        let px = frame.pixel(r, c);
        Rgb(std::array::from_fn(|k| {
            (((1.0 - a) * px[k] + a * heat[k]).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Writes `frame_NNN.png` per frame and `patch_probs.json` with the raw `T x P` grid.
pub fn emit_patch_heatmap(
    model: &DeepShieldModel,
    clip: &VideoClip,
    out_dir: &Path,
    config: &EvalConfig,
) -> Result<HeatmapOutput> {
    let probs = patch_probs(model, clip)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let grid = model.config().grid_side();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut frames = Vec::with_capacity(clip.len());
    for (t, frame) in clip.frames.iter().enumerate() {
        let path = out_dir.join(format!("frame_{t:03}.png"));
        overlay(frame, &probs[t], grid, config)
            .save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        frames.push(path);
    }
    let json = out_dir.join("patch_probs.json");
    let body = HeatmapJson {
        source_id: clip.source_id.clone(),
        start_index: clip.start_index,
        frames: clip.len(),
        grid: [grid, grid],
        probs,
    };
    let text = serde_json::to_string_pretty(&body).expect("heatmap json serializes");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(HeatmapOutput { frames, json })
}
