//! Global-feature objective: clip features, cross-entropy, supervised contrastive loss and
//! the weighted total with the patch-level term.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::bce_loss;

/// Which samples the contrastive denominator sums over for an anchor `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupconDenominator {
    /// The other samples of the anchor's class.
    Paper,
    /// Every other sample in the batch.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Minimum count of positive mask pixels for a patch to be labelled fake.
    pub theta: i64,
    /// Weight of the patch-level loss.
    pub omega: f64,
    /// Weight of the contrastive loss.
    pub upsilon: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub supcon_denominator: SupconDenominator,
    pub supcon_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            theta: 10,
            omega: 0.5,
            upsilon: 0.5,
            tau: 0.07,
            supcon_denominator: SupconDenominator::Paper,
            supcon_normalize: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 1 {
            return Err(Error::config("losses.theta", format!("must be >= 1, got {}", self.theta)));
        }
        for (key, v) in [("losses.omega", self.omega), ("losses.upsilon", self.upsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("losses.tau", format!("must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn theta(&self) -> usize {
        self.theta.max(1) as usize
    }
}

/// Mean of frame-level class embeddings over the frame axis: `(..., T, C) -> (..., C)`.
pub fn global_clip_feature(class_embeddings: &Tensor) -> Result<Tensor> {
    if class_embeddings.rank() < 2 || class_embeddings.dim(D::Minus2)? == 0 {
        return Err(Error::ShapeMismatch(format!(
            "expected (..., T, C) with T >= 1, got {:?}",
            class_embeddings.dims()
        )));
    }
    Ok(class_embeddings.mean(D::Minus2)?)
}

/// Mean cross-entropy of clip probabilities against {0, 1} labels.
pub fn cls_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    bce_loss(probs, labels)
}

const MASKED: f64 = -1e30;

/// Supervised contrastive loss over `features: (B, C)`.
///
/// For an anchor `v` with positives `P(v)` (other samples of its class) and denominator set
/// `D(v)`, the anchor's loss is `-1/|P(v)| * sum_{i in P(v)} log(exp(s_vi) / sum_{j in D(v)} exp(s_vj))`
/// with `s = f_v . f_j / tau`. Anchors without positives are skipped.
pub fn supcon_loss(
    features: &Tensor,
    labels: &[u8],
    tau: f64,
    denominator: SupconDenominator,
    normalize: bool,
) -> Result<Tensor> {
    let (b, _) = features.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} features vs {} labels", labels.len())));
    }
    if b < 2 {
        return Err(Error::ShapeMismatch("contrastive loss needs at least 2 samples".into()));
    }
    let (dtype, device) = (features.dtype(), features.device());
    let f = if normalize {
        let norm = features.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-24)?.sqrt()?;
        features.broadcast_div(&norm)?
    } else {
        features.clone()
    };
    let sim = (f.matmul(&f.t()?)? / tau)?;

    let mut pos = vec![0f64; b * b];
    let mut denom = vec![MASKED; b * b];
    let mut weight = vec![0f64; b];
    for v in 0..b {
        let positives = (0..b).filter(|&i| i != v && labels[i] == labels[v]).count();
        if positives == 0 {
            log::warn!("contrastive anchor {v} has no positives; skipped");
            continue;
        }
        weight[v] = 1.0;
        for j in (0..b).filter(|&j| j != v) {
            let same = labels[j] == labels[v];
            if same {
                pos[v * b + j] = 1.0 / positives as f64;
            }
            if same || denominator == SupconDenominator::Standard {
                denom[v * b + j] = 0.0;
            }
        }
    }
    let anchors: f64 = weight.iter().sum();
    if anchors == 0.0 {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    let to_t = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    };
    let pos = to_t(pos, (b, b))?;
    let denom = to_t(denom, (b, b))?;
    let weight = to_t(weight, (b, 1))?;

    let masked = (&sim + &denom)?;
    let max = masked.max_keepdim(1)?.detach();
    let lse = (masked.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?;
    let pos_term = (&sim * &pos)?.sum_keepdim(1)?;
    let per_anchor = ((lse - pos_term)? * weight)?;
    Ok((per_anchor.sum_all()? / anchors)?)
}

/// Classification loss plus `upsilon` times the contrastive loss.
pub fn gfd_loss(
    probs: &Tensor,
    labels: &[u8],
    features: &Tensor,
    config: &LossConfig,
) -> Result<GfdTerms> {
    let y = Tensor::from_vec(
        labels.iter().map(|&l| l as f32).collect::<Vec<_>>(),
        labels.len(),
        probs.device(),
    )?
    .to_dtype(probs.dtype())?;
    let cls = cls_loss(probs, &y)?;
    let supcon = supcon_loss(
        features,
        labels,
        config.tau,
        config.supcon_denominator,
        config.supcon_normalize,
    )?;
    let total = combine_gfd(&cls, &supcon, config.upsilon)?;
    Ok(GfdTerms { total, cls, supcon })
}

#[derive(Debug, Clone)]
pub struct GfdTerms {
    pub total: Tensor,
    pub cls: Tensor,
    pub supcon: Tensor,
}

pub fn combine_gfd(cls: &Tensor, supcon: &Tensor, upsilon: f64) -> Result<Tensor> {
    Ok((cls + (supcon * upsilon)?)?)
}

/// `omega * lpg + gfd`.
pub fn overall_loss(lpg: &Tensor, gfd: &Tensor, omega: f64) -> Result<Tensor> {
    Ok(((lpg * omega)? + gfd)?)
}

/// Scalar value of a 0-d tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
