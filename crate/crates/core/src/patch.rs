//! Patch-level supervision: turns blend masks into per-patch labels and scores patch
//! probabilities against them with binary cross-entropy.

use candle_core::{DType, Device, Tensor};

use crate::data::BlendMask;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Patch labels, `T x P`, row-major over the frame's patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabelGrid {
    pub frames: usize,
    pub patches: usize,
    pub labels: Vec<u8>,
    pub theta: usize,
}

impl PatchLabelGrid {
    pub fn zeros(frames: usize, patches: usize, theta: usize) -> Self {
        Self {
            frames,
            patches,
            labels: vec![0; frames * patches],
            theta,
        }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        Ok(Tensor::from_vec(v, (self.frames, self.patches), device)?.to_dtype(dtype)?)
    }
}

/// Patch fake-probabilities, `T x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProbGrid {
    pub frames: usize,
    pub patches: usize,
    pub probs: Vec<f64>,
}

impl PatchProbGrid {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (frames, patches) = t.dims2()?;
        let probs = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            frames,
            patches,
            probs,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.probs.clone(), (self.frames, self.patches), device)?.to_dtype(dtype)?)
    }
}

/// Number of strictly positive mask values in a patch.
pub fn patch_mask_score(patch: &[f32]) -> usize {
    patch.iter().filter(|&&v| v > 0.0).count()
}

/// Side length of the patch grid, if `patches` is a perfect square.
pub fn grid_side(patches: usize) -> Option<usize> {
    let side = (patches as f64).sqrt().round() as usize;
    (side * side == patches && side > 0).then_some(side)
}

/// Labels a patch fake when at least `theta` of its mask pixels are positive.
pub fn patch_labels(mask: &BlendMask, patches: usize, theta: usize) -> Result<PatchLabelGrid> {
    let (h, w) = (mask.height(), mask.width());
    let side = grid_side(patches)
        .filter(|s| h % s == 0 && w % s == 0)
        .ok_or(Error::NonSquareDivisible {
            height: h,
            width: w,
            patches,
        })?;
    let (ph, pw) = (h / side, w / side);
    let mut labels = Vec::with_capacity(mask.frames() * patches);
    let mut buf = Vec::with_capacity(ph * pw);
    for t in 0..mask.frames() {
        let m = mask.frame(t);
        for gr in 0..side {
            for gc in 0..side {
                buf.clear();
                for r in gr * ph..(gr + 1) * ph {
                    buf.extend_from_slice(&m[r * w + gc * pw..r * w + (gc + 1) * pw]);
                }
                labels.push((patch_mask_score(&buf) >= theta) as u8);
            }
        }
    }
    Ok(PatchLabelGrid {
        frames: mask.frames(),
        patches,
        labels,
        theta,
    })
}

/// Mean binary cross-entropy between probabilities and {0, 1} labels of equal shape.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dims(),
            labels.dims()
        )));
    }
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (labels * p.log()?)?;
    let neg = (labels.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Patch-level loss: binary cross-entropy averaged over every frame and patch.
pub fn lpg_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    bce_loss(probs, labels)
}

/// [`lpg_loss`] on plain grids, evaluated in double precision.
pub fn lpg_loss_grid(probs: &PatchProbGrid, labels: &PatchLabelGrid) -> Result<f64> {
    if probs.frames != labels.frames || probs.patches != labels.patches {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {}x{} vs labels {}x{}",
            probs.frames, probs.patches, labels.frames, labels.patches
        )));
    }
    let dev = Device::Cpu;
    let p = probs.to_tensor(DType::F64, &dev)?;
    let y = labels.to_tensor(DType::F64, &dev)?;
    Ok(lpg_loss(&p, &y)?.to_scalar::<f64>()?)
}
