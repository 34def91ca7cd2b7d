//! Procedural face videos with exact landmarks, for offline end-to-end runs.
//!
//! Each video is a shaded ellipse head with eyes, brows and a mouth over a striped
//! background, drifting and rotating smoothly. Fakes are rendered the same way and then
//! blended with [`crate::sam`], keeping the blend masks.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    format_landmarks, FaceBox, Frame, Label, LandmarkSet, Video, VideoClip, VideoMeta, VideoRecord,
    MIN_VIDEO_FRAMES,
};
use crate::error::{Error, Result};
use crate::sam::{temporal_artifact_generate, SamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub real: usize,
    pub fake: usize,
    pub frames: usize,
    pub image_size: usize,
    /// Domain tag written for the fake videos.
    pub fake_domain: String,
    /// Standard deviation of per-frame pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            real: 8,
            fake: 8,
            frames: 60,
            image_size: 64,
            fake_domain: "synthetic-blend".into(),
            noise: 0.01,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_VIDEO_FRAMES {
            return Err(Error::config(
                "generate.frames",
                format!("must be at least {MIN_VIDEO_FRAMES}, got {}", self.frames),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::config("generate.image_size", format!("must be at least 16, got {}", self.image_size)));
        }
        if self.real == 0 {
            return Err(Error::config("generate.real", "at least one real video is required"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config("generate.noise", format!("must be in [0, 0.5], got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FaceParams {
    bg: [[f32; 3]; 2],
    stripe_freq: f32,
    stripe_angle: f32,
    stripe_phase: f32,
    center: (f32, f32),
    axes: (f32, f32),
    skin: [f32; 3],
    eye_color: [f32; 3],
    mouth_color: [f32; 3],
    eye_spread: f32,
    mouth_width: f32,
    amp: (f32, f32),
    period: (f32, f32, f32),
    phase: (f32, f32, f32),
    max_angle: f32,
    texture: (f32, f32, f32),
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

impl FaceParams {
    fn sample(size: f32, rng: &mut impl Rng) -> Self {
        let color = |rng: &mut _, lo: f32, hi: f32| -> [f32; 3] { std::array::from_fn(|_| uniform(rng, lo, hi)) };
        let skin_base = uniform(rng, 0.45, 0.85);
        Self {
            bg: [color(rng, 0.05, 0.6), color(rng, 0.2, 0.9)],
            stripe_freq: uniform(rng, 0.1, 0.4),
            stripe_angle: uniform(rng, 0.0, PI),
            stripe_phase: uniform(rng, 0.0, 2.0 * PI),
            center: (
                size * (0.5 + uniform(rng, -0.05, 0.05)),
                size * (0.5 + uniform(rng, -0.05, 0.05)),
            ),
            axes: (size * uniform(rng, 0.25, 0.31), size * uniform(rng, 0.33, 0.39)),
            skin: [
                skin_base + uniform(rng, 0.05, 0.15),
                skin_base * uniform(rng, 0.75, 0.9),
                skin_base * uniform(rng, 0.55, 0.75),
            ],
            eye_color: color(rng, 0.02, 0.25),
            mouth_color: [uniform(rng, 0.4, 0.7), uniform(rng, 0.05, 0.2), uniform(rng, 0.1, 0.25)],
            eye_spread: uniform(rng, 0.35, 0.45),
            mouth_width: uniform(rng, 0.35, 0.5),
            amp: (size * uniform(rng, 0.01, 0.04), size * uniform(rng, 0.01, 0.04)),
            period: (uniform(rng, 30.0, 70.0), uniform(rng, 30.0, 70.0), uniform(rng, 40.0, 90.0)),
            phase: (
                uniform(rng, 0.0, 2.0 * PI),
                uniform(rng, 0.0, 2.0 * PI),
                uniform(rng, 0.0, 2.0 * PI),
            ),
            max_angle: uniform(rng, 0.03, 0.15),
            texture: (uniform(rng, 0.6, 1.4), uniform(rng, 0.6, 1.4), uniform(rng, 0.02, 0.05)),
        }
    }

    /// Head centre and rotation at frame `t`.
    fn pose(&self, t: usize) -> ((f32, f32), f32) {
        let t = t as f32;
        let cx = self.center.0 + self.amp.0 * (2.0 * PI * t / self.period.0 + self.phase.0).sin();
        let cy = self.center.1 + self.amp.1 * (2.0 * PI * t / self.period.1 + self.phase.1).sin();
        let angle = self.max_angle * (2.0 * PI * t / self.period.2 + self.phase.2).sin();
        ((cx, cy), angle)
    }

    /// Landmarks in face coordinates: jaw and forehead contour, brows, eyes, nose, mouth.
    fn local_landmarks(&self) -> Vec<(f32, f32)> {
        let (a, b) = self.axes;
        let mut pts: Vec<(f32, f32)> = (0..12)
            .map(|i| {
                let th = 2.0 * PI * i as f32 / 12.0;
                (0.92 * a * th.cos(), 0.92 * b * th.sin())
            })
            .collect();
        let (ex, ey) = (self.eye_spread * a, -0.22 * b);
        pts.extend([
            (-ex, ey - 0.16 * b),
            (ex, ey - 0.16 * b),
            (-ex, ey),
            (ex, ey),
            (0.0, 0.1 * b),
            (-self.mouth_width * a, 0.45 * b),
            (self.mouth_width * a, 0.45 * b),
        ]);
        pts
    }

    fn landmarks(&self, t: usize) -> LandmarkSet {
        let ((cx, cy), ang) = self.pose(t);
        let (s, c) = ang.sin_cos();
        LandmarkSet::new(
            self.local_landmarks()
                .into_iter()
                .map(|(u, v)| (cx + c * u - s * v, cy + s * u + c * v))
                .collect(),
        )
    }

    fn render(&self, t: usize, size: usize, noise: f32, rng: &mut impl Rng) -> Frame {
        let ((cx, cy), ang) = self.pose(t);
        let (s, c) = ang.sin_cos();
        let (a, b) = self.axes;
        let (ex, ey) = (self.eye_spread * a, -0.22 * b);
        let (sdir, cdir) = self.stripe_angle.sin_cos();
        // signed coverage of an ellipse, antialiased over about one pixel
        let cover = |u: f32, v: f32, ra: f32, rb: f32| {
            let d = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
            ((1.0 - d) * ra.min(rb) + 0.5).clamp(0.0, 1.0)
        };
        let mut px = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let stripe = 0.5 + 0.5 * (self.stripe_freq * (fx * cdir + fy * sdir) + self.stripe_phase).sin();
                let mut rgb: [f32; 3] = std::array::from_fn(|k| self.bg[0][k] + (self.bg[1][k] - self.bg[0][k]) * stripe);
                let (dx, dy) = (fx - cx, fy - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                let head = cover(u, v, a, b);
                if head > 0.0 {
                    let r2 = (u / a).powi(2) + (v / b).powi(2);
                    let shade = 0.7 + 0.3 * (1.0 - r2).max(0.0).sqrt() - 0.08 * (u / a);
                    let tex = self.texture.2 * (self.texture.0 * u).sin() * (self.texture.1 * v).sin();
                    let mut face: [f32; 3] = std::array::from_fn(|k| self.skin[k] * shade + tex);
                    let mut paint = |cov: f32, col: [f32; 3]| {
                        for k in 0..3 {
                            face[k] += cov * (col[k] - face[k]);
                        }
                    };
                    for side in [-1.0, 1.0] {
                        paint(cover(u - side * ex, v - ey, 0.13 * a, 0.07 * b), [0.95, 0.95, 0.92]);
                        paint(cover(u - side * ex, v - ey, 0.06 * a, 0.06 * b), self.eye_color);
                        paint(
                            cover(u - side * ex, v - ey + 0.16 * b, 0.16 * a, 0.025 * b),
                            self.eye_color.map(|c| c * 0.8),
                        );
                    }
                    paint(cover(u, v - 0.1 * b, 0.06 * a, 0.1 * b), self.skin.map(|c| c * 0.8));
                    paint(cover(u, v - 0.45 * b, self.mouth_width * a, 0.06 * b), self.mouth_color);
                    for k in 0..3 {
                        rgb[k] += head * (face[k] - rgb[k]);
                    }
                }
                for v in rgb {
                    let n = if noise > 0.0 {
                        noise * (rng.random::<f32>() + rng.random::<f32>() + rng.random::<f32>() - 1.5) * 2.0
                    } else {
                        0.0
                    };
                    px.push((v + n).clamp(0.0, 1.0));
                }
            }
        }
        quantize(Frame::new(size, size, px).expect("pixel count matches"))
    }
}

fn quantize(frame: Frame) -> Frame {
    Frame::from_rgb8(&frame.to_rgb8())
}

fn quantize_mask(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&m| (m.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect()
}

/// A rendered video held in memory, already quantized to 8 bits as it would be on disk.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub label: Label,
    pub domain: String,
    pub frames: Vec<Frame>,
    pub landmarks: Vec<LandmarkSet>,
    pub masks: Option<Vec<Vec<f32>>>,
}

impl SyntheticVideo {
    fn record(&self, dir: &Path) -> VideoRecord {
        let size = self.frames[0].height();
        let n = self.frames.len();
        VideoRecord {
            video_id: self.video_id.clone(),
            label: self.label,
            domain: self.domain.clone(),
            frame_paths: (0..n).map(|i| dir.join("frames").join(format!("{i:04}.png"))).collect(),
            landmark_path: Some(dir.join("landmarks.txt")),
            mask_paths: self
                .masks
                .as_ref()
                .map(|_| (0..n).map(|i| dir.join("masks").join(format!("{i:04}.png"))).collect()),
            face_boxes: vec![
                FaceBox {
                    x: 0.0,
                    y: 0.0,
                    width: size as f32,
                    height: size as f32,
                };
                n
            ],
            source_shape: (size, size),
        }
    }

    /// The same video as [`crate::data::load_dataset`] followed by [`Video::load`] would
    /// produce, without touching the disk.
    pub fn into_video(self) -> Result<Video> {
        let record = self.record(Path::new(&self.video_id));
        Video::from_parts(record, self.frames, Some(self.landmarks), self.masks)
    }
}

/// Renders one face video.
pub fn render_face_video(video_id: &str, frames: usize, size: usize, noise: f32, rng: &mut impl Rng) -> SyntheticVideo {
    let face = FaceParams::sample(size as f32, rng);
    let max = size as f32;
    SyntheticVideo {
        video_id: video_id.into(),
        label: Label::Real,
        domain: "real".into(),
        frames: (0..frames).map(|t| face.render(t, size, noise, rng)).collect(),
        landmarks: (0..frames)
            .map(|t| face.landmarks(t).map(|x, y| (x.clamp(0.0, max), y.clamp(0.0, max))))
            .collect(),
        masks: None,
    }
}

/// Turns a rendered video into a fake by blending every frame with one parameter draw.
pub fn blend_video(video: SyntheticVideo, domain: &str, sam: &SamConfig, rng: &mut impl Rng) -> Result<SyntheticVideo> {
    let clip = VideoClip {
        frames: video.frames,
        source_id: video.video_id.clone(),
        start_index: 0,
    };
    let out = temporal_artifact_generate(&clip, &video.landmarks, sam, rng)?;
    let masks = (0..out.mask.frames()).map(|t| quantize_mask(out.mask.frame(t))).collect();
    Ok(SyntheticVideo {
        video_id: video.video_id,
        label: Label::Fake,
        domain: domain.into(),
        frames: out.clip.frames.into_iter().map(quantize).collect(),
        landmarks: video.landmarks,
        masks: Some(masks),
    })
}

/// Renders the videos of a dataset spec. Faces use one random stream and blends another,
/// so the same seed always yields the same faces whatever the blend settings.
pub fn synthesize_videos(spec: &GenerateConfig, sam: &SamConfig) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut face_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blend_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    blend_rng.set_stream(2);
    let mut out = Vec::with_capacity(spec.real + spec.fake);
    for i in 0..spec.real {
        out.push(render_face_video(&format!("real_{i:04}"), spec.frames, spec.image_size, spec.noise, &mut face_rng));
    }
    for i in 0..spec.fake {
        let v = render_face_video(&format!("fake_{i:04}"), spec.frames, spec.image_size, spec.noise, &mut face_rng);
        out.push(blend_video(v, &spec.fake_domain, sam, &mut blend_rng)?);
    }
    Ok(out)
}

fn write_video(video: &SyntheticVideo, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let record = video.record(dir);
    for (frame, path) in video.frames.iter().zip(&record.frame_paths) {
        frame.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    if let (Some(masks), Some(paths)) = (&video.masks, &record.mask_paths) {
        let mask_dir = dir.join("masks");
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        let size = video.frames[0].height() as u32;
        for (m, path) in masks.iter().zip(paths) {
            let raw = m.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            image::GrayImage::from_raw(size, size, raw)
                .expect("mask size matches")
                .save(path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
        }
    }
    let lm_path = dir.join("landmarks.txt");
    fs::write(&lm_path, format_landmarks(&video.landmarks)).map_err(|e| Error::io(&lm_path, e))?;
    let size = video.frames[0].height() as f32;
    let meta = VideoMeta {
        label: video.label,
        face_box: vec![[0.0, 0.0, size, size]; video.frames.len()],
        landmarks: Some("landmarks.txt".into()),
        domain: Some(video.domain.clone()),
        masks: video.masks.as_ref().map(|_| "masks".into()),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Writes a synthetic dataset under `out_dir`, one directory per video. Fails if `out_dir`
/// exists unless `force`, in which case it is replaced.
pub fn generate_synthetic_dataset(spec: &GenerateConfig, sam: &SamConfig, out_dir: &Path, force: bool) -> Result<PathBuf> {
    if out_dir.exists() {
        if !force {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let videos = synthesize_videos(spec, sam)?;
    for v in &videos {
        write_video(v, &out_dir.join(&v.video_id))?;
    }
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sam::convex_hull;

    fn small() -> GenerateConfig {
        GenerateConfig {
            real: 2,
            fake: 2,
            frames: 48,
            image_size: 32,
            ..GenerateConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synthesize_videos(&small(), &SamConfig::default()).unwrap();
        let b = synthesize_videos(&small(), &SamConfig::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.masks, y.masks);
        }
        let c = synthesize_videos(
            &GenerateConfig {
                seed: 1,
                ..small()
            },
            &SamConfig::default(),
        )
        .unwrap();
        assert_ne!(a[0].frames, c[0].frames);
    }

    #[test]
    fn fakes_have_nonzero_masks_and_reals_none() {
        let videos = synthesize_videos(&small(), &SamConfig::default()).unwrap();
        for v in &videos {
            match v.label {
                Label::Real => assert!(v.masks.is_none()),
                Label::Fake => {
                    let m = v.masks.as_ref().unwrap();
                    assert!(m.iter().all(|f| f.iter().any(|&x| x > 0.0)));
                    assert_eq!(v.domain, "synthetic-blend");
                }
            }
        }
    }

    #[test]
    fn landmarks_in_bounds_with_area() {
        let videos = synthesize_videos(&small(), &SamConfig::default()).unwrap();
        for v in &videos {
            for lm in &v.landmarks {
                assert!(lm.validate(32, 32).is_ok());
                assert!(convex_hull(&lm.points).unwrap().len() >= 3);
            }
        }
    }

    #[test]
    fn faces_move_smoothly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = render_face_video("v", 48, 64, 0.0, &mut rng);
        for w in v.landmarks.windows(2) {
            for (p, q) in w[0].points.iter().zip(&w[1].points) {
                assert!((p.0 - q.0).abs() < 2.0 && (p.1 - q.1).abs() < 2.0);
            }
        }
        assert_ne!(v.frames[0], v.frames[20]);
    }
}
