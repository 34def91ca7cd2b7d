//! Feature-space forgery augmentation on frame-level class embeddings of fake videos.
//!
//! Domain-bridging generation (DFG) re-normalizes one fake video's features to statistics
//! mixed with those of a fake video from another domain. Boundary-expanding generation
//! (BFG) scales a video's features away from their own per-channel mean.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Domain tag carried by clips synthesized with the blending augmentation.
pub const SAM_BLEND_DOMAIN: &str = "sam-blend";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfaConfig {
    pub enabled: bool,
    /// Boundary expansion factor.
    pub alpha: f64,
    /// Both shape parameters of the Beta distribution the mixing weight is drawn from.
    pub beta: f64,
    /// Replace a draw `l` by `max(l, 1 - l)`.
    pub symmetric_lambda: bool,
    /// Backpropagate through the channel statistics instead of treating them as constants.
    pub stats_grad: bool,
}

impl Default for DfaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 1.1,
            beta: 0.1,
            symmetric_lambda: false,
            stats_grad: false,
        }
    }
}

impl DfaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::config("dfa.alpha", format!("must be >= 1, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("dfa.beta", format!("must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-channel mean and population standard deviation, each of shape `(C)`.
#[derive(Debug, Clone)]
pub struct DomainStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Class embeddings `(N, T, C)` of one fake video and its forgery domain.
#[derive(Debug, Clone)]
pub struct FakeFeatureGroup {
    pub features: Tensor,
    pub domain_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfaKind {
    Dfg,
    Bfg,
}

/// One DFG pairing: `source` is re-normalized toward `partner` with weight `lambda` on its
/// own statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DfgDraw {
    pub source: usize,
    pub partner: usize,
    pub lambda: f64,
}

/// Random choices for one batch, drawn before features exist so they can be recorded and
/// replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct DfaPlan {
    pub draws: Vec<DfgDraw>,
    pub alpha: f64,
    /// Every group shared one domain, so pairing happened within it.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentedFeatures {
    /// `(N, T, C)`
    pub features: Tensor,
    pub kind: DfaKind,
    pub source: usize,
}

/// Mean and population standard deviation per channel over every leading index of
/// `features: (..., C)`, with the deviation floored at [`SIGMA_FLOOR`].
pub fn channel_stats(features: &Tensor) -> Result<DomainStats> {
    let c = features.dim(D::Minus1)?;
    let flat = features.reshape(((), c))?;
    let mu = flat.mean(0)?;
    let var = flat.broadcast_sub(&mu)?.sqr()?.mean(0)?;
    let sigma = var.sqrt()?.maximum(SIGMA_FLOOR)?;
    Ok(DomainStats { mu, sigma })
}

pub fn mix_stats(a: &DomainStats, b: &DomainStats, lambda: f64) -> Result<DomainStats> {
    if a.mu.dims() != b.mu.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mixing stats of {:?} and {:?} channels",
            a.mu.dims(),
            b.mu.dims()
        )));
    }
    let mix = |x: &Tensor, y: &Tensor| -> Result<Tensor> { Ok(((x * lambda)? + (y * (1.0 - lambda))?)?) };
    Ok(DomainStats {
        mu: mix(&a.mu, &b.mu)?,
        sigma: mix(&a.sigma, &b.sigma)?,
    })
}

/// `mixed.sigma * (f - own.mu) / own.sigma + mixed.mu`, per channel.
pub fn dfg_transform(features: &Tensor, own: &DomainStats, mixed: &DomainStats) -> Result<Tensor> {
    Ok(features
        .broadcast_sub(&own.mu)?
        .broadcast_div(&own.sigma)?
        .broadcast_mul(&mixed.sigma)?
        .broadcast_add(&mixed.mu)?)
}

/// `own.mu + alpha * (f - own.mu)`, per channel.
pub fn bfg_transform(features: &Tensor, own: &DomainStats, alpha: f64) -> Result<Tensor> {
    if alpha < 1.0 {
        return Err(Error::config("dfa.alpha", format!("must be >= 1, got {alpha}")));
    }
    Ok(features
        .broadcast_sub(&own.mu)?
        .affine(alpha, 0.0)?
        .broadcast_add(&own.mu)?)
}

/// Draws DFG partners and mixing weights for groups with the given domain tags. Partners
/// come uniformly from groups of a different domain; if there is none, from the other
/// groups of the same domain, and the plan is flagged degenerate.
pub fn plan_dfa(tags: &[&str], config: &DfaConfig, rng: &mut impl Rng) -> Result<DfaPlan> {
    if tags.is_empty() {
        return Err(Error::EmptyDataset("no fake feature groups to augment".into()));
    }
    let beta = Beta::new(config.beta, config.beta).map_err(|e| Error::config("dfa.beta", e.to_string()))?;
    let degenerate = tags.iter().all(|t| *t == tags[0]);
    let mut draws = Vec::with_capacity(tags.len());
    for (i, tag) in tags.iter().enumerate() {
        let candidates: Vec<usize> = if degenerate {
            (0..tags.len()).filter(|&j| j != i).collect()
        } else {
            (0..tags.len()).filter(|&j| tags[j] != *tag).collect()
        };
        let partner = if candidates.is_empty() {
            i
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        let mut lambda: f64 = beta.sample(rng);
        if config.symmetric_lambda {
            lambda = lambda.max(1.0 - lambda);
        }
        draws.push(DfgDraw {
            source: i,
            partner,
            lambda,
        });
    }
    Ok(DfaPlan {
        draws,
        alpha: config.alpha,
        degenerate,
    })
}

/// Applies a plan: for every group, its DFG output followed by its BFG output.
pub fn apply_dfa(groups: &[&Tensor], plan: &DfaPlan, stats_grad: bool) -> Result<Vec<AugmentedFeatures>> {
    if groups.len() != plan.draws.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan covers {} groups, got {}",
            plan.draws.len(),
            groups.len()
        )));
    }
    let stats = groups
        .iter()
        .map(|g| {
            if stats_grad {
                channel_stats(g)
            } else {
                channel_stats(&g.detach())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(2 * groups.len());
    for d in &plan.draws {
        let own = &stats[d.source];
        let mixed = mix_stats(own, &stats[d.partner], d.lambda)?;
        out.push(AugmentedFeatures {
            features: dfg_transform(groups[d.source], own, &mixed)?,
            kind: DfaKind::Dfg,
            source: d.source,
        });
        out.push(AugmentedFeatures {
            features: bfg_transform(groups[d.source], own, plan.alpha)?,
            kind: DfaKind::Bfg,
            source: d.source,
        });
    }
    Ok(out)
}

/// Plans and applies augmentation in one go: two fake-labelled feature sets per group.
pub fn augment_fake_batch(
    groups: &[FakeFeatureGroup],
    config: &DfaConfig,
    rng: &mut impl Rng,
) -> Result<Vec<AugmentedFeatures>> {
    let tags: Vec<&str> = groups.iter().map(|g| g.domain_tag.as_str()).collect();
    let plan = plan_dfa(&tags, config, rng)?;
    if plan.degenerate {
        log::warn!("all {} fake groups share domain {:?}; pairing within it", tags.len(), tags[0]);
    }
    let feats: Vec<&Tensor> = groups.iter().map(|g| &g.features).collect();
    apply_dfa(&feats, &plan, config.stats_grad)
}
