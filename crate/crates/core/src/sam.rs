//! Spatiotemporal artifact modeling: synthesizes blended fake clips, with per-frame
//! manipulation masks, out of real clips.
//!
//! Each frame is split into an inner (face) and an outer (background) version of itself,
//! one of which is enhanced. The inner version is pasted into the outer one through a
//! soft mask built from the convex hull of the facial landmarks, deformed and blurred.
//! All random parameters are drawn once per clip so the artifact stays consistent over
//! time; only a small per-frame jitter on the enhancement strength varies.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BlendMask, Frame, LandmarkSet, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendTarget {
    Inner,
    Outer,
}

/// Enhancement applied to one of the two frame versions. Disabled families are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementParams {
    pub target: BlendTarget,
    pub color_shift: Option<[f32; 3]>,
    pub brightness_factor: Option<f32>,
    pub sharpness_amount: Option<f32>,
    /// Half-width of the multiplicative per-frame jitter on enhancement strength.
    pub jitter: f32,
}

impl EnhancementParams {
    pub fn is_identity(&self) -> bool {
        self.color_shift.is_none() && self.brightness_factor.is_none() && self.sharpness_amount.is_none()
    }
}

/// Low-frequency displacement field: a square grid of control displacements spanning the
/// frame, bilinearly interpolated in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformField {
    pub grid: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl DeformField {
    pub fn zero(grid: usize) -> Self {
        Self {
            grid,
            dx: vec![0.0; grid * grid],
            dy: vec![0.0; grid * grid],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }

    pub fn max_displacement(&self) -> f32 {
        self.dx.iter().chain(&self.dy).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Displacement at `(x, y)` in a `width x height` frame.
    pub fn at(&self, x: f32, y: f32, height: usize, width: usize) -> (f32, f32) {
        if self.grid < 2 {
            return (
                self.dx.first().copied().unwrap_or(0.0),
                self.dy.first().copied().unwrap_or(0.0),
            );
        }
        let g = (self.grid - 1) as f32;
        let u = (x / width as f32 * g).clamp(0.0, g);
        let v = (y / height as f32 * g).clamp(0.0, g);
        let (i0, j0) = (v.floor() as usize, u.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.grid - 1), (j0 + 1).min(self.grid - 1));
        let (fv, fu) = (v - i0 as f32, u - j0 as f32);
        let lerp = |f: &[f32]| {
            let top = f[i0 * self.grid + j0] * (1.0 - fu) + f[i0 * self.grid + j1] * fu;
            let bot = f[i1 * self.grid + j0] * (1.0 - fu) + f[i1 * self.grid + j1] * fu;
            top * (1.0 - fv) + bot * fv
        };
        (lerp(&self.dx), lerp(&self.dy))
    }

    /// Displacement at every pixel center, row-major.
    pub fn dense(&self, height: usize, width: usize) -> Vec<(f32, f32)> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                out.push(self.at(c as f32 + 0.5, r as f32 + 0.5, height, width));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Landmark indices forming the hull; `None` uses every landmark.
    pub hull_indices: Option<Vec<usize>>,
    pub deform: DeformField,
    /// Odd box-blur width in pixels; 1 disables blurring.
    pub blur_kernel_size: usize,
    /// Peak mask value, in (0, 1].
    pub blend_ratio: f32,
    /// Blur the hull mask before warping it instead of after.
    pub blur_before_deform: bool,
}

impl MaskParams {
    /// Plain hull indicator: no deformation, no blur, full blend.
    pub fn hard(grid: usize) -> Self {
        Self {
            hull_indices: None,
            deform: DeformField::zero(grid),
            blur_kernel_size: 1,
            blend_ratio: 1.0,
            blur_before_deform: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.blur_kernel_size == 0 || self.blur_kernel_size % 2 == 0 {
            return Err(Error::config(
                "sam.blur_kernel_sizes",
                format!("blur kernel must be odd and >= 1, got {}", self.blur_kernel_size),
            ));
        }
        if !(self.blend_ratio > 0.0 && self.blend_ratio <= 1.0) {
            return Err(Error::config(
                "sam.blend_ratios",
                format!("blend ratio must be in (0, 1], got {}", self.blend_ratio),
            ));
        }
        if self.deform.dx.len() != self.deform.grid * self.deform.grid
            || self.deform.dy.len() != self.deform.dx.len()
        {
            return Err(Error::ShapeMismatch("deform field does not match its grid".into()));
        }
        Ok(())
    }
}

/// Sampling ranges for blend parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    pub color_shift_max: f32,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub sharpness_max: f32,
    /// Probability of enabling each enhancement family; at least one is always on.
    pub enhance_prob: f64,
    pub deform_grid: usize,
    /// Largest control displacement, as a fraction of the face-box (crop) size.
    pub deform_max_frac: f32,
    pub blur_kernel_sizes: Vec<usize>,
    pub blend_ratios: Vec<f32>,
    pub jitter: f32,
    pub blur_before_deform: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            color_shift_max: 0.08,
            brightness_min: 0.9,
            brightness_max: 1.1,
            sharpness_max: 0.5,
            enhance_prob: 0.5,
            deform_grid: 4,
            deform_max_frac: 0.05,
            blur_kernel_sizes: vec![3, 5, 7, 9, 11, 13, 15],
            blend_ratios: vec![0.25, 0.5, 0.75, 1.0],
            jitter: 0.02,
            blur_before_deform: false,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| Err(Error::config(format!("sam.{key}"), reason));
        if !(self.color_shift_max >= 0.0) {
            return fail("color_shift_max", "must be >= 0");
        }
        if !(self.brightness_min > 0.0 && self.brightness_min <= self.brightness_max) {
            return fail("brightness_min", "need 0 < brightness_min <= brightness_max");
        }
        if !(self.sharpness_max >= 0.0) {
            return fail("sharpness_max", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.enhance_prob) {
            return fail("enhance_prob", "must be in [0, 1]");
        }
        if self.deform_grid < 2 {
            return fail("deform_grid", "must be >= 2");
        }
        if !(0.0..0.5).contains(&self.deform_max_frac) {
            return fail("deform_max_frac", "must be in [0, 0.5)");
        }
        if self.blur_kernel_sizes.is_empty() || self.blur_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return fail("blur_kernel_sizes", "must be a non-empty list of odd sizes");
        }
        if self.blend_ratios.is_empty() || self.blend_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return fail("blend_ratios", "must be a non-empty list of values in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return fail("jitter", "must be in [0, 1)");
        }
        Ok(())
    }

    pub fn sample_enhancement(&self, rng: &mut impl Rng) -> EnhancementParams {
        let target = if rng.random_bool(0.5) {
            BlendTarget::Inner
        } else {
            BlendTarget::Outer
        };
        let mut on = [
            rng.random_bool(self.enhance_prob),
            rng.random_bool(self.enhance_prob),
            rng.random_bool(self.enhance_prob),
        ];
        if !on.iter().any(|&b| b) {
            on[rng.random_range(0..3)] = true;
        }
        let c = self.color_shift_max;
        let color_shift = on[0].then(|| std::array::from_fn(|_| uniform(rng, -c, c)));
        let brightness_factor = on[1].then(|| uniform(rng, self.brightness_min, self.brightness_max));
        let sharpness_amount = on[2].then(|| uniform(rng, 0.0, self.sharpness_max));
        EnhancementParams {
            target,
            color_shift,
            brightness_factor,
            sharpness_amount,
            jitter: self.jitter,
        }
    }

    pub fn sample_mask_params(&self, crop_size: usize, rng: &mut impl Rng) -> MaskParams {
        let max = self.deform_max_frac * crop_size as f32;
        let n = self.deform_grid * self.deform_grid;
        let deform = DeformField {
            grid: self.deform_grid,
            dx: (0..n).map(|_| uniform(rng, -max, max)).collect(),
            dy: (0..n).map(|_| uniform(rng, -max, max)).collect(),
        };
        MaskParams {
            hull_indices: None,
            deform,
            blur_kernel_size: *self.blur_kernel_sizes.choose(rng).expect("validated non-empty"),
            blend_ratio: *self.blend_ratios.choose(rng).expect("validated non-empty"),
            blur_before_deform: self.blur_before_deform,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn cross(o: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain). Fails when the points are collinear.
pub fn convex_hull(points: &[(f32, f32)]) -> Result<Vec<(f32, f32)>> {
    if points.len() < 3 {
        return Err(Error::DegenerateHull(format!("{} points", points.len())));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    let mut hull: Vec<(f32, f32)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f32, f32)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let area2: f32 = (0..hull.len())
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if hull.len() < 3 || area2.abs() < 1e-6 {
        return Err(Error::DegenerateHull("landmarks are collinear".into()));
    }
    Ok(hull)
}

fn inside_convex(hull: &[(f32, f32)], p: (f32, f32)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Binary hull indicator sampled at pixel centers `(col + 0.5, row + 0.5)`.
fn hull_indicator(hull: &[(f32, f32)], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; height * width];
    let bounds = hull_bounds(hull);
    for r in 0..height {
        for c in 0..width {
            let p = (c as f32 + 0.5, r as f32 + 0.5);
            if in_bounds(bounds, p) && inside_convex(hull, p) {
                out[r * width + c] = 1.0;
            }
        }
    }
    out
}

/// Separable box blur with zero padding; `k` must be odd.
pub fn box_blur(src: &[f32], height: usize, width: usize, k: usize) -> Vec<f32> {
    if k <= 1 {
        return src.to_vec();
    }
    let r = (k / 2) as isize;
    let norm = 1.0 / k as f32;
    let mut tmp = vec![0.0; src.len()];
    for row in 0..height {
        let line = &src[row * width..(row + 1) * width];
        let mut acc: f32 = line.iter().take(r as usize).sum();
        for c in 0..width as isize {
            if c + r < width as isize {
                acc += line[(c + r) as usize];
            }
            if c - r - 1 >= 0 {
                acc -= line[(c - r - 1) as usize];
            }
            tmp[row * width + c as usize] = acc * norm;
        }
    }
    let mut out = vec![0.0; src.len()];
    for col in 0..width {
        let mut acc: f32 = (0..(r as usize).min(height)).map(|row| tmp[row * width + col]).sum();
        for row in 0..height as isize {
            if row + r < height as isize {
                acc += tmp[(row + r) as usize * width + col];
            }
            if row - r - 1 >= 0 {
                acc -= tmp[(row - r - 1) as usize * width + col];
            }
            out[row as usize * width + col] = acc * norm;
        }
    }
    out
}

fn bilinear(src: &[f32], height: usize, width: usize, x: f32, y: f32) -> f32 {
    // sample position in pixel-center coordinates
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let get = |r: f32, c: f32| {
        if r < 0.0 || c < 0.0 || r >= height as f32 || c >= width as f32 {
            0.0
        } else {
            src[r as usize * width + c as usize]
        }
    };
    let top = get(y0, x0) * (1.0 - ax) + get(y0, x0 + 1.0) * ax;
    let bot = get(y0 + 1.0, x0) * (1.0 - ax) + get(y0 + 1.0, x0 + 1.0) * ax;
    top * (1.0 - ay) + bot * ay
}

/// Soft blend mask for one frame: the deformed, blurred landmark hull scaled by the
/// blend ratio. Returns `height * width` values in [0, 1].
pub fn make_blend_mask(
    landmarks: &LandmarkSet,
    params: &MaskParams,
    frame_shape: (usize, usize),
) -> Result<Vec<f32>> {
    params.validate()?;
    let (height, width) = frame_shape;
    let hull = convex_hull(&hull_points(landmarks, params)?)?;
    let field = (!params.deform.is_zero()).then(|| params.deform.dense(height, width));
    Ok(hull_mask(&hull, params, frame_shape, field.as_deref()))
}

fn hull_points(landmarks: &LandmarkSet, params: &MaskParams) -> Result<Vec<(f32, f32)>> {
    match &params.hull_indices {
        Some(idx) => idx
            .iter()
            .map(|&i| {
                landmarks
                    .points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::DegenerateHull(format!("hull index {i} out of range")))
            })
            .collect(),
        None => Ok(landmarks.points.clone()),
    }
}

fn hull_mask(hull: &[(f32, f32)], params: &MaskParams, (height, width): (usize, usize), field: Option<&[(f32, f32)]>) -> Vec<f32> {
    let mut mask = match field {
        None => {
            let m = hull_indicator(hull, height, width);
            box_blur(&m, height, width, params.blur_kernel_size)
        }
        Some(field) if params.blur_before_deform => {
            let soft = box_blur(&hull_indicator(hull, height, width), height, width, params.blur_kernel_size);
            let mut out = vec![0.0; height * width];
            for r in 0..height {
                for c in 0..width {
                    let (dx, dy) = field[r * width + c];
                    out[r * width + c] = bilinear(&soft, height, width, c as f32 + 0.5 + dx, r as f32 + 0.5 + dy);
                }
            }
            out
        }
        Some(field) => {
            let bounds = hull_bounds(hull);
            let mut warped = vec![0.0; height * width];
            for r in 0..height {
                for c in 0..width {
                    let (dx, dy) = field[r * width + c];
                    let p = (c as f32 + 0.5 + dx, r as f32 + 0.5 + dy);
                    if in_bounds(bounds, p) && inside_convex(hull, p) {
                        warped[r * width + c] = 1.0;
                    }
                }
            }
            box_blur(&warped, height, width, params.blur_kernel_size)
        }
    };
    for v in &mut mask {
        *v = (*v * params.blend_ratio).clamp(0.0, 1.0);
    }
    mask
}

fn hull_bounds(hull: &[(f32, f32)]) -> [f32; 4] {
    hull.iter().fold([f32::MAX, f32::MIN, f32::MAX, f32::MIN], |b, &(x, y)| {
        [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)]
    })
}

fn in_bounds(b: [f32; 4], (x, y): (f32, f32)) -> bool {
    x >= b[0] && x <= b[1] && y >= b[2] && y <= b[3]
}

/// Applies the enhancement with its strength scaled by `strength` (1 = nominal).
pub fn enhance(frame: &Frame, params: &EnhancementParams, strength: f32) -> Frame {
    let (h, w) = (frame.height(), frame.width());
    let src = frame.pixels();
    let mut px = src.to_vec();
    if let Some(amount) = params.sharpness_amount {
        let a = amount * strength;
        for ch in 0..3 {
            let plane: Vec<f32> = src.iter().skip(ch).step_by(3).copied().collect();
            let blurred = box_blur_clamped(&plane, h, w);
            for i in 0..h * w {
                px[i * 3 + ch] = plane[i] + a * (plane[i] - blurred[i]);
            }
        }
    }
    if let Some(b) = params.brightness_factor {
        let f = 1.0 + (b - 1.0) * strength;
        px.iter_mut().for_each(|v| *v *= f);
    }
    if let Some(shift) = params.color_shift {
        for chunk in px.chunks_exact_mut(3) {
            for ch in 0..3 {
                chunk[ch] += shift[ch] * strength;
            }
        }
    }
    Frame::from_clamped(h, w, px)
}

/// 3x3 box blur with edge clamping, used as the unsharp-mask low pass.
fn box_blur_clamped(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; plane.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in [-1isize, 0, 1] {
                for dc in [-1isize, 0, 1] {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    acc += plane[rr * w + cc];
                }
            }
            out[r * w + c] = acc / 9.0;
        }
    }
    out
}

/// `mask * inner + (1 - mask) * outer`, per pixel and channel, clamped to [0, 1].
pub fn blend_frames(inner: &Frame, outer: &Frame, mask: &[f32]) -> Result<Frame> {
    let (h, w) = (inner.height(), inner.width());
    if outer.height() != h || outer.width() != w || mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "blend of {h}x{w} inner, {}x{} outer and {} mask values",
            outer.height(),
            outer.width(),
            mask.len()
        )));
    }
    let (a, b) = (inner.pixels(), outer.pixels());
    let mut px = Vec::with_capacity(a.len());
    for (i, &m) in mask.iter().enumerate() {
        for ch in 3 * i..3 * i + 3 {
            px.push(m * a[ch] + (1.0 - m) * b[ch]);
        }
    }
    Ok(Frame::from_clamped(h, w, px))
}

fn split_inner_outer(frame: &Frame, params: &EnhancementParams, strength: f32) -> (Frame, Frame) {
    let enhanced = enhance(frame, params, strength);
    match params.target {
        BlendTarget::Inner => (enhanced, frame.clone()),
        BlendTarget::Outer => (frame.clone(), enhanced),
    }
}

/// Blends one frame. Returns the blended frame and its mask.
pub fn spatial_artifact_generate(
    frame: &Frame,
    landmarks: &LandmarkSet,
    mask_params: &MaskParams,
    enh_params: &EnhancementParams,
) -> Result<(Frame, Vec<f32>)> {
    let mask = make_blend_mask(landmarks, mask_params, (frame.height(), frame.width()))?;
    let (inner, outer) = split_inner_outer(frame, enh_params, 1.0);
    Ok((blend_frames(&inner, &outer, &mask)?, mask))
}

/// Output of a clip-level blend, with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SamOutput {
    pub clip: VideoClip,
    pub mask: BlendMask,
    pub enhancement: EnhancementParams,
    pub mask_params: MaskParams,
    /// Per-frame multiplier on enhancement strength.
    pub frame_strength: Vec<f32>,
}

/// Blends a whole clip with one set of parameters shared by all frames.
pub fn temporal_artifact_generate(
    clip: &VideoClip,
    landmarks: &[LandmarkSet],
    config: &SamConfig,
    rng: &mut impl Rng,
) -> Result<SamOutput> {
    if landmarks.len() != clip.len() {
        return Err(Error::LandmarkCountMismatch {
            frames: clip.len(),
            landmarks: landmarks.len(),
        });
    }
    let (h, w) = clip
        .frame_shape()
        .ok_or_else(|| Error::ShapeMismatch("empty clip".into()))?;
    let enhancement = config.sample_enhancement(rng);
    let mask_params = config.sample_mask_params(h.max(w), rng);
    let frame_strength: Vec<f32> = (0..clip.len())
        .map(|_| 1.0 + uniform(rng, -config.jitter, config.jitter))
        .collect();
    apply_clip_blend(clip, landmarks, enhancement, mask_params, frame_strength)
}

/// Deterministic part of [`temporal_artifact_generate`]: blends every frame with the given
/// parameters.
pub fn apply_clip_blend(
    clip: &VideoClip,
    landmarks: &[LandmarkSet],
    enhancement: EnhancementParams,
    mask_params: MaskParams,
    frame_strength: Vec<f32>,
) -> Result<SamOutput> {
    if landmarks.len() != clip.len() || frame_strength.len() != clip.len() {
        return Err(Error::LandmarkCountMismatch {
            frames: clip.len(),
            landmarks: landmarks.len(),
        });
    }
    let (h, w) = clip
        .frame_shape()
        .ok_or_else(|| Error::ShapeMismatch("empty clip".into()))?;
    mask_params.validate()?;
    let field = (!mask_params.deform.is_zero()).then(|| mask_params.deform.dense(h, w));
    let mut frames = Vec::with_capacity(clip.len());
    let mut masks = Vec::with_capacity(clip.len());
    for ((frame, lm), &s) in clip.frames.iter().zip(landmarks).zip(&frame_strength) {
        let hull = convex_hull(&hull_points(lm, &mask_params)?)?;
        let mask = hull_mask(&hull, &mask_params, (h, w), field.as_deref());
        let (inner, outer) = split_inner_outer(frame, &enhancement, s);
        frames.push(blend_frames(&inner, &outer, &mask)?);
        masks.push(mask);
    }
    Ok(SamOutput {
        clip: VideoClip {
            frames,
            source_id: clip.source_id.clone(),
            start_index: clip.start_index,
        },
        mask: BlendMask::from_frames(h, w, masks)?,
        enhancement,
        mask_params,
        frame_strength,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Ray-casting point-in-polygon, independent of the half-plane test used above.
    fn ray_cast_inside(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
        let mut inside = false;
        let n = poly.len();
        for i in 0..n {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[(i + n - 1) % n];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    }

    fn gradient_frame(h: usize, w: usize) -> Frame {
        let px = (0..h * w * 3)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Frame::new(h, w, px).unwrap()
    }

    fn face_landmarks(size: f32) -> LandmarkSet {
        LandmarkSet::new(vec![
            (0.3 * size, 0.25 * size),
            (0.7 * size, 0.27 * size),
            (0.8 * size, 0.6 * size),
            (0.5 * size, 0.85 * size),
            (0.2 * size, 0.62 * size),
        ])
    }

    #[test]
    fn triangle_mask_matches_ray_casting() {
        let tri = vec![(3.3, 4.1), (27.7, 9.2), (12.4, 29.6)];
        let lm = LandmarkSet::new(tri.clone());
        let mask = make_blend_mask(&lm, &MaskParams::hard(4), (32, 32)).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let expect = ray_cast_inside(&tri, c as f32 + 0.5, r as f32 + 0.5);
                assert_eq!(mask[r * 32 + c], expect as u8 as f32, "pixel ({r}, {c})");
            }
        }
    }

    #[test]
    fn unblurred_mask_is_binary_in_ratio() {
        let mut params = MaskParams::hard(4);
        params.blend_ratio = 0.75;
        let mask = make_blend_mask(&face_landmarks(40.0), &params, (40, 40)).unwrap();
        assert!(mask.iter().all(|&v| v == 0.0 || v == 0.75));
        assert!(mask.iter().any(|&v| v == 0.75));
    }

    #[test]
    fn collinear_landmarks_fail() {
        let lm = LandmarkSet::new(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)]);
        let err = make_blend_mask(&lm, &MaskParams::hard(4), (8, 8)).unwrap_err();
        assert!(matches!(err, Error::DegenerateHull(_)));
    }

    #[test]
    fn even_blur_kernel_rejected() {
        let mut params = MaskParams::hard(4);
        params.blur_kernel_size = 4;
        assert!(make_blend_mask(&face_landmarks(16.0), &params, (16, 16)).is_err());
    }

    #[test]
    fn blur_keeps_core_and_softens_edge() {
        let mut params = MaskParams::hard(4);
        params.blur_kernel_size = 7;
        let mask = make_blend_mask(&face_landmarks(64.0), &params, (64, 64)).unwrap();
        assert_eq!(mask[32 * 64 + 32], 1.0);
        assert!(mask.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn box_blur_matches_direct_sum() {
        let (h, w, k) = (9, 11, 5);
        let src: Vec<f32> = (0..h * w).map(|i| ((i * 7) % 13) as f32).collect();
        let fast = box_blur(&src, h, w, k);
        let r = (k / 2) as isize;
        for row in 0..h as isize {
            for col in 0..w as isize {
                let mut acc = 0.0;
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row + dr, col + dc);
                        if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                            acc += src[(rr * w as isize + cc) as usize];
                        }
                    }
                }
                let got = fast[(row * w as isize + col) as usize];
                assert!((got - acc / (k * k) as f32).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let inner = Frame::filled(2, 2, 0.2);
        let outer = Frame::filled(2, 2, 0.6);
        assert_eq!(blend_frames(&inner, &outer, &[1.0; 4]).unwrap(), inner);
        assert_eq!(blend_frames(&inner, &outer, &[0.0; 4]).unwrap(), outer);
        let mid = blend_frames(&inner, &outer, &[0.5; 4]).unwrap();
        assert!(mid.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn spatial_blend_is_identity_outside_mask() {
        let frame = gradient_frame(32, 32);
        let lm = face_landmarks(32.0);
        let mut mp = MaskParams::hard(4);
        mp.blur_kernel_size = 5;
        let enh = EnhancementParams {
            target: BlendTarget::Inner,
            color_shift: Some([0.05, -0.05, 0.02]),
            brightness_factor: Some(1.05),
            sharpness_amount: None,
            jitter: 0.0,
        };
        let (blended, mask) = spatial_artifact_generate(&frame, &lm, &mp, &enh).unwrap();
        let mut changed = false;
        for i in 0..32 * 32 {
            if mask[i] == 0.0 {
                assert_eq!(&blended.pixels()[i * 3..i * 3 + 3], &frame.pixels()[i * 3..i * 3 + 3]);
            } else {
                changed |= blended.pixels()[i * 3..i * 3 + 3] != frame.pixels()[i * 3..i * 3 + 3];
            }
        }
        assert!(changed);
    }

    #[test]
    fn constant_clip_gives_constant_output() {
        let frame = gradient_frame(24, 24);
        let clip = VideoClip {
            frames: vec![frame; 5],
            source_id: "c".into(),
            start_index: 0,
        };
        let lms = vec![face_landmarks(24.0); 5];
        let cfg = SamConfig {
            jitter: 0.0,
            ..SamConfig::default()
        };
        let out = temporal_artifact_generate(&clip, &lms, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 1..5 {
            assert_eq!(out.clip.frames[t], out.clip.frames[0]);
            assert_eq!(out.mask.frame(t), out.mask.frame(0));
        }
    }

    #[test]
    fn temporal_blend_is_seed_deterministic_and_composes() {
        let clip = VideoClip {
            frames: (0..4).map(|_| gradient_frame(20, 20)).collect(),
            source_id: "c".into(),
            start_index: 7,
        };
        let lms: Vec<LandmarkSet> = (0..4)
            .map(|t| {
                let base = face_landmarks(20.0);
                LandmarkSet::new(base.points.iter().map(|&(x, y)| (x + t as f32 * 0.3, y)).collect())
            })
            .collect();
        let cfg = SamConfig::default();
        let a = temporal_artifact_generate(&clip, &lms, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = temporal_artifact_generate(&clip, &lms, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.clip.start_index, 7);
        for t in 0..4 {
            let expect = make_blend_mask(&lms[t], &a.mask_params, (20, 20)).unwrap();
            assert_eq!(a.mask.frame(t), expect.as_slice());
        }
    }

    #[test]
    fn landmark_count_mismatch() {
        let clip = VideoClip {
            frames: vec![gradient_frame(8, 8); 3],
            source_id: "c".into(),
            start_index: 0,
        };
        let err = temporal_artifact_generate(
            &clip,
            &[face_landmarks(8.0)],
            &SamConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LandmarkCountMismatch { frames: 3, landmarks: 1 }));
    }

    #[test]
    fn at_least_one_enhancement_enabled() {
        let cfg = SamConfig {
            enhance_prob: 0.0,
            ..SamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert!(!cfg.sample_enhancement(&mut rng).is_identity());
        }
    }

    proptest! {
        #[test]
        fn mask_in_unit_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SamConfig::default();
            let params = cfg.sample_mask_params(32, &mut rng);
            let mask = make_blend_mask(&face_landmarks(32.0), &params, (32, 32)).unwrap();
            prop_assert!(mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(params.deform.max_displacement() <= 0.05 * 32.0);
        }

        #[test]
        fn exactly_one_side_enhanced(seed in 0u64..200) {
            let frame = gradient_frame(16, 16);
            let clip = VideoClip { frames: vec![frame.clone(); 3], source_id: "p".into(), start_index: 0 };
            let lms = vec![face_landmarks(16.0); 3];
            let out = temporal_artifact_generate(&clip, &lms, &SamConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            // Pixels fully outside the mask come from the outer version, fully inside from the inner one.
            for t in 0..3 {
                let m = out.mask.frame(t);
                for i in 0..16 * 16 {
                    let src = &frame.pixels()[i * 3..i * 3 + 3];
                    let got = &out.clip.frames[t].pixels()[i * 3..i * 3 + 3];
                    if m[i] == 0.0 && out.enhancement.target == BlendTarget::Inner {
                        prop_assert_eq!(got, src);
                    }
                }
            }
        }
    }
}
