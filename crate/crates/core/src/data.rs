//! Frame, clip and mask data model, the on-disk dataset layout and the clip
//! sampling protocols used for training and inference.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/<video_id>/frames/000000.png ...   8-bit RGB frames, sorted by name
//! <root>/<video_id>/meta.json               label, per-frame face boxes, file names
//! <root>/<video_id>/landmarks.txt           one line per frame: `x0 y0 x1 y1 ...`
//! <root>/<video_id>/masks/000000.png ...    optional 8-bit grayscale blend masks
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every video must hold four inference segments of twelve frames.
pub const MIN_VIDEO_FRAMES: usize = 48;
/// Number of segments a video is split into at inference time.
pub const INFERENCE_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        matches!(self, Label::Fake)
    }

    /// 0 for real, 1 for fake.
    pub fn as_index(self) -> u8 {
        self.is_fake() as u8
    }
}

/// An RGB frame with interleaved `[r, g, b]` pixels in row-major order, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "frame {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    /// Clamps every value into [0, 1] instead of rejecting it.
    pub(crate) fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * 3);
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Facial landmarks of one frame, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f32, f32)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f32, f32)>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the point count and that every point lies inside a `width x height` frame.
    pub fn validate(&self, height: usize, width: usize) -> std::result::Result<(), String> {
        if self.points.len() < 3 {
            return Err(format!("need at least 3 points, got {}", self.points.len()));
        }
        for &(x, y) in &self.points {
            if !x.is_finite() || !y.is_finite() {
                return Err("non-finite coordinate".into());
            }
            if x < 0.0 || y < 0.0 || x > width as f32 || y > height as f32 {
                return Err(format!("point ({x}, {y}) outside {width}x{height} frame"));
            }
        }
        Ok(())
    }

    pub(crate) fn map(&self, f: impl Fn(f32, f32) -> (f32, f32)) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| f(x, y)).collect(),
        }
    }
}

/// `T` consecutive frames cut from one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub source_id: String,
    pub start_index: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the first frame.
    pub fn frame_shape(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height, f.width))
    }
}

/// Per-frame soft manipulation masks, `T x H x W`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl BlendMask {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            values: vec![0.0; frames * height * width],
        }
    }

    pub fn from_frames(height: usize, width: usize, frames: Vec<Vec<f32>>) -> Result<Self> {
        let mut values = Vec::with_capacity(frames.len() * height * width);
        for (t, f) in frames.iter().enumerate() {
            if f.len() != height * width {
                return Err(Error::ShapeMismatch(format!(
                    "mask frame {t} has {} values, expected {}",
                    f.len(),
                    height * width
                )));
            }
            values.extend(f.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(Self {
            frames: frames.len(),
            height,
            width,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Face crop rectangle in source-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
}

/// On-disk `meta.json` of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub label: Label,
    /// One `[x, y, width, height]` box per frame.
    pub face_box: Vec<[f32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
    /// Manipulation type, used to pair forgery domains. Defaults to `"real"` or `"unknown"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    /// Directory (relative to the video directory) holding per-frame mask PNGs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: Label,
    pub domain: String,
    pub frame_paths: Vec<PathBuf>,
    pub landmark_path: Option<PathBuf>,
    pub mask_paths: Option<Vec<PathBuf>>,
    pub face_boxes: Vec<FaceBox>,
    /// `(height, width)` of the source frames.
    pub source_shape: (usize, usize),
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frame_paths.len()
    }

    /// Reads and validates the landmark file against the source frame size.
    pub fn read_landmarks(&self) -> Result<Option<Vec<LandmarkSet>>> {
        let Some(path) = &self.landmark_path else {
            return Ok(None);
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sets = parse_landmarks(&text).map_err(|reason| Error::MalformedLandmarks {
            path: path.clone(),
            reason,
        })?;
        if sets.len() != self.num_frames() {
            return Err(Error::MalformedLandmarks {
                path: path.clone(),
                reason: format!(
                    "{} landmark lines for {} frames",
                    sets.len(),
                    self.num_frames()
                ),
            });
        }
        let (h, w) = self.source_shape;
        for (t, set) in sets.iter().enumerate() {
            set.validate(h, w).map_err(|reason| Error::MalformedLandmarks {
                path: path.clone(),
                reason: format!("frame {t}: {reason}"),
            })?;
        }
        Ok(Some(sets))
    }
}

/// Parses the landmark text format: one line per frame of whitespace-separated `x y` pairs.
/// Lines starting with `#` are skipped.
pub fn parse_landmarks(text: &str) -> std::result::Result<Vec<LandmarkSet>, String> {
    let mut sets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f32> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f32>()
                    .map_err(|e| format!("line {}: `{tok}`: {e}", lineno + 1))
            })
            .collect::<std::result::Result<_, _>>()?;
        if values.len() % 2 != 0 {
            return Err(format!("line {}: odd number of coordinates", lineno + 1));
        }
        let points = values.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        sets.push(LandmarkSet::new(points));
    }
    Ok(sets)
}

pub fn format_landmarks(sets: &[LandmarkSet]) -> String {
    let mut out = String::new();
    for set in sets {
        let line: Vec<String> = set
            .points
            .iter()
            .map(|(x, y)| format!("{x:.3} {y:.3}"))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_record(dir: &Path, video_id: &str) -> Result<VideoRecord> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: VideoMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;

    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::MissingFrames {
            video_id: video_id.into(),
            reason: format!("no frames directory at {}", frames_dir.display()),
        });
    }
    let frame_paths = list_pngs(&frames_dir)?;
    if frame_paths.len() < MIN_VIDEO_FRAMES {
        return Err(Error::TooShort {
            video_id: video_id.into(),
            frames: frame_paths.len(),
            required: MIN_VIDEO_FRAMES,
        });
    }
    if meta.face_box.len() != frame_paths.len() {
        return Err(Error::MissingFrames {
            video_id: video_id.into(),
            reason: format!(
                "{} frames but {} face boxes",
                frame_paths.len(),
                meta.face_box.len()
            ),
        });
    }
    let (w, h) = image::image_dimensions(&frame_paths[0]).map_err(|source| Error::Image {
        path: frame_paths[0].clone(),
        source,
    })?;

    let mask_paths = match &meta.masks {
        Some(name) => {
            let masks = list_pngs(&dir.join(name))?;
            if masks.len() != frame_paths.len() {
                return Err(Error::MissingFrames {
                    video_id: video_id.into(),
                    reason: format!("{} frames but {} masks", frame_paths.len(), masks.len()),
                });
            }
            Some(masks)
        }
        None => None,
    };

    let record = VideoRecord {
        video_id: video_id.into(),
        label: meta.label,
        domain: meta.domain.clone().unwrap_or_else(|| match meta.label {
            Label::Real => "real".into(),
            Label::Fake => "unknown".into(),
        }),
        frame_paths,
        landmark_path: meta.landmarks.as_ref().map(|name| dir.join(name)),
        mask_paths,
        face_boxes: meta
            .face_box
            .iter()
            .map(|b| FaceBox {
                x: b[0],
                y: b[1],
                width: b[2],
                height: b[3],
            })
            .collect(),
        source_shape: (h as usize, w as usize),
    };

    match (record.label, &record.landmark_path) {
        (Label::Real, None) => {
            return Err(Error::MalformedLandmarks {
                path: dir.to_path_buf(),
                reason: format!("real video {video_id} has no landmark file"),
            })
        }
        (_, Some(_)) => {
            record.read_landmarks()?;
        }
        _ => {}
    }
    Ok(record)
}

/// Loads and validates every video directory under `root`, ordered by video id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<VideoRecord>> {
    let root = root.as_ref();
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("dataset root {} contains no videos", root.display());
    }
    dirs.iter().map(|(id, dir)| load_record(dir, id)).collect()
}

/// Loads every video under `root` at `crop_size`, decoding frames up front when `preload`.
pub fn load_videos(root: impl AsRef<Path>, crop_size: usize, preload: bool) -> Result<Vec<Video>> {
    load_dataset(root)?
        .into_iter()
        .map(|r| {
            if preload {
                Video::load(r, crop_size)
            } else {
                Video::open(r, crop_size)
            }
        })
        .collect()
}

/// A video ready for clip extraction, frames cropped and resized to `crop_size`.
///
/// Frames are either held in memory or read from disk per clip.
#[derive(Debug, Clone)]
pub struct Video {
    pub record: VideoRecord,
    crop_size: usize,
    landmarks: Option<Vec<LandmarkSet>>,
    frames: Option<Vec<Frame>>,
    masks: Option<Vec<Vec<f32>>>,
}

impl Video {
    /// Wraps a record; frames are decoded lazily when clips are requested.
    pub fn open(record: VideoRecord, crop_size: usize) -> Result<Self> {
        let landmarks = record
            .read_landmarks()?
            .map(|sets| {
                sets.iter()
                    .zip(&record.face_boxes)
                    .map(|(set, b)| crop_landmarks(set, b, crop_size))
                    .collect()
            });
        Ok(Self {
            record,
            crop_size,
            landmarks,
            frames: None,
            masks: None,
        })
    }

    /// Like [`Video::open`] but decodes every frame (and mask) up front.
    pub fn load(record: VideoRecord, crop_size: usize) -> Result<Self> {
        let mut video = Self::open(record, crop_size)?;
        let n = video.num_frames();
        video.frames = Some(video.read_frames(0, n)?);
        if video.record.mask_paths.is_some() {
            video.masks = Some(video.read_masks(0, n)?);
        }
        Ok(video)
    }

    /// Builds an in-memory video directly from decoded data.
    pub fn from_parts(
        record: VideoRecord,
        frames: Vec<Frame>,
        landmarks: Option<Vec<LandmarkSet>>,
        masks: Option<Vec<Vec<f32>>>,
    ) -> Result<Self> {
        let crop_size = frames.first().map_or(0, |f| f.height);
        if frames.iter().any(|f| f.height != crop_size || f.width != crop_size) {
            return Err(Error::ShapeMismatch("frames must be square and equal-sized".into()));
        }
        if let Some(l) = &landmarks {
            if l.len() != frames.len() {
                return Err(Error::LandmarkCountMismatch {
                    frames: frames.len(),
                    landmarks: l.len(),
                });
            }
        }
        Ok(Self {
            record,
            crop_size,
            landmarks,
            frames: Some(frames),
            masks,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.record.num_frames()
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    pub fn label(&self) -> Label {
        self.record.label
    }

    pub fn landmarks(&self) -> Option<&[LandmarkSet]> {
        self.landmarks.as_deref()
    }

    pub fn has_masks(&self) -> bool {
        self.masks.is_some() || self.record.mask_paths.is_some()
    }

    fn read_frames(&self, start: usize, len: usize) -> Result<Vec<Frame>> {
        (start..start + len)
            .map(|i| {
                let path = &self.record.frame_paths[i];
                let img = image::open(path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_rgb8();
                Ok(Frame::from_rgb8(&crop_rgb(
                    &img,
                    &self.record.face_boxes[i],
                    self.crop_size,
                )))
            })
            .collect()
    }

    fn read_masks(&self, start: usize, len: usize) -> Result<Vec<Vec<f32>>> {
        let paths = self.record.mask_paths.as_ref().expect("checked by caller");
        (start..start + len)
            .map(|i| {
                let img = image::open(&paths[i])
                    .map_err(|source| Error::Image {
                        path: paths[i].clone(),
                        source,
                    })?
                    .to_luma8();
                let img = crop_gray(&img, &self.record.face_boxes[i], self.crop_size);
                Ok(img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
            })
            .collect()
    }

    fn check_span(&self, start: usize, len: usize) -> Result<()> {
        if start + len > self.num_frames() {
            return Err(Error::TooShort {
                video_id: self.record.video_id.clone(),
                frames: self.num_frames(),
                required: start + len,
            });
        }
        Ok(())
    }

    /// Frames `start..start + len`, bit-identical to the stored frames.
    pub fn clip(&self, start: usize, len: usize) -> Result<VideoClip> {
        self.check_span(start, len)?;
        let frames = match &self.frames {
            Some(all) => all[start..start + len].to_vec(),
            None => self.read_frames(start, len)?,
        };
        Ok(VideoClip {
            frames,
            source_id: self.record.video_id.clone(),
            start_index: start,
        })
    }

    pub fn clip_landmarks(&self, start: usize, len: usize) -> Option<Vec<LandmarkSet>> {
        self.landmarks
            .as_ref()
            .and_then(|l| l.get(start..start + len).map(<[_]>::to_vec))
    }

    /// Stored blend masks for the given span, when the video has any.
    pub fn clip_mask(&self, start: usize, len: usize) -> Result<Option<BlendMask>> {
        self.check_span(start, len)?;
        let frames = match (&self.masks, &self.record.mask_paths) {
            (Some(all), _) => all[start..start + len].to_vec(),
            (None, Some(_)) => self.read_masks(start, len)?,
            (None, None) => return Ok(None),
        };
        BlendMask::from_frames(self.crop_size, self.crop_size, frames).map(Some)
    }
}

fn crop_landmarks(set: &LandmarkSet, b: &FaceBox, crop: usize) -> LandmarkSet {
    let sx = crop as f32 / b.width;
    let sy = crop as f32 / b.height;
    let max = crop as f32;
    set.map(|x, y| {
        (
            ((x - b.x) * sx).clamp(0.0, max),
            ((y - b.y) * sy).clamp(0.0, max),
        )
    })
}

fn crop_rect(b: &FaceBox, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let x = b.x.max(0.0).round() as u32;
    let y = b.y.max(0.0).round() as u32;
    let x = x.min(w.saturating_sub(1));
    let y = y.min(h.saturating_sub(1));
    let bw = (b.width.round() as u32).clamp(1, w - x);
    let bh = (b.height.round() as u32).clamp(1, h - y);
    (x, y, bw, bh)
}

fn crop_rgb(img: &RgbImage, b: &FaceBox, crop: usize) -> RgbImage {
    let (x, y, w, h) = crop_rect(b, img.width(), img.height());
    let c = crop as u32;
    if (x, y, w, h) == (0, 0, img.width(), img.height()) && w == c && h == c {
        return img.clone();
    }
    let view = imageops::crop_imm(img, x, y, w, h).to_image();
    imageops::resize(&view, c, c, imageops::FilterType::Triangle)
}

fn crop_gray(img: &GrayImage, b: &FaceBox, crop: usize) -> GrayImage {
    let (x, y, w, h) = crop_rect(b, img.width(), img.height());
    let c = crop as u32;
    if (x, y, w, h) == (0, 0, img.width(), img.height()) && w == c && h == c {
        return img.clone();
    }
    let view = imageops::crop_imm(img, x, y, w, h).to_image();
    imageops::resize(&view, c, c, imageops::FilterType::Triangle)
}

/// Uniformly random clip starts; clips may overlap.
pub fn training_starts(
    num_frames: usize,
    num_clips: usize,
    clip_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if num_clips == 0 || clip_len == 0 {
        return Err(Error::config(
            "trainer.clips_per_video",
            "clip count and length must be at least 1",
        ));
    }
    if num_frames < clip_len {
        return Err(Error::TooShort {
            video_id: String::new(),
            frames: num_frames,
            required: clip_len,
        });
    }
    let last = num_frames - clip_len;
    Ok((0..num_clips).map(|_| rng.random_range(0..=last)).collect())
}

/// Start of each inference segment. Segments have `num_frames / 4` frames, the last one
/// absorbs the remainder.
pub fn inference_starts(num_frames: usize, clip_len: usize) -> Result<[usize; INFERENCE_SEGMENTS]> {
    let segment = num_frames / INFERENCE_SEGMENTS;
    if num_frames < MIN_VIDEO_FRAMES || segment < clip_len {
        return Err(Error::TooShort {
            video_id: String::new(),
            frames: num_frames,
            required: MIN_VIDEO_FRAMES.max(clip_len * INFERENCE_SEGMENTS),
        });
    }
    Ok(std::array::from_fn(|i| i * segment))
}

fn name_video(err: Error, video_id: &str) -> Error {
    match err {
        Error::TooShort {
            frames, required, ..
        } => Error::TooShort {
            video_id: video_id.into(),
            frames,
            required,
        },
        other => other,
    }
}

pub fn sample_training_clips(
    video: &Video,
    num_clips: usize,
    clip_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<VideoClip>> {
    training_starts(video.num_frames(), num_clips, clip_len, rng)
        .map_err(|e| name_video(e, &video.record.video_id))?
        .into_iter()
        .map(|s| video.clip(s, clip_len))
        .collect()
}

/// First `clip_len` frames of each of the four segments; no randomness.
pub fn sample_inference_clips(video: &Video, clip_len: usize) -> Result<Vec<VideoClip>> {
    inference_starts(video.num_frames(), clip_len)
        .map_err(|e| name_video(e, &video.record.video_id))?
        .into_iter()
        .map(|s| video.clip(s, clip_len))
        .collect()
}
