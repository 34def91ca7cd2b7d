use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{training_starts, BlendMask, Label, Video, VideoClip};
use crate::dfa::{apply_dfa, plan_dfa, AugmentedFeatures, DfaConfig, DfaPlan, SAM_BLEND_DOMAIN};
use crate::error::{Error, Result};
use crate::sam::{temporal_artifact_generate, SamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Dataset,
    SamBlend,
}

/// One video's contribution to a batch: `clips_per_iteration` clips with their masks.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub video_id: String,
    pub label: Label,
    pub origin: Origin,
    pub domain: String,
    pub clips: Vec<VideoClip>,
    /// Blend masks, one per clip: all zero for real clips, the blend mask for synthesized
    /// clips, and absent for dataset fakes (they get no patch supervision).
    pub masks: Option<Vec<BlendMask>>,
}

impl BatchSample {
    pub fn is_blend(&self) -> bool {
        self.origin == Origin::SamBlend
    }
}

/// Samples for one optimization step.
///
/// Real and fake samples are encoded; DFA adds two feature sets per fake sample, derived
/// from its encoded class embeddings according to `dfa`.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub real: Vec<BatchSample>,
    pub fake: Vec<BatchSample>,
    /// `None` when augmentation is disabled.
    pub dfa: Option<DfaPlan>,
}

impl TrainingBatch {
    pub fn num_dfa(&self) -> usize {
        self.dfa.as_ref().map_or(0, |p| 2 * p.draws.len())
    }

    pub fn len(&self) -> usize {
        self.real.len() + self.fake.len() + self.num_dfa()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples that receive patch supervision: reals followed by blends.
    pub fn patch_supervised(&self) -> impl Iterator<Item = &BatchSample> {
        self.real.iter().chain(self.fake.iter().filter(|s| s.is_blend()))
    }

    pub fn encoded(&self) -> impl Iterator<Item = &BatchSample> {
        self.real.iter().chain(&self.fake)
    }

    /// Labels in loss order: reals, fakes, then DFA outputs (all fake).
    pub fn labels(&self) -> Vec<u8> {
        self.encoded()
            .map(|s| s.label.as_index())
            .chain(std::iter::repeat_n(Label::Fake.as_index(), self.num_dfa()))
            .collect()
    }

    /// Runs DFA given class embeddings `(N, T, C)` for each fake sample, in batch order.
    pub fn dfa_features(&self, fake_embeddings: &[&Tensor], stats_grad: bool) -> Result<Vec<AugmentedFeatures>> {
        match &self.dfa {
            Some(plan) => apply_dfa(fake_embeddings, plan, stats_grad),
            None => Ok(Vec::new()),
        }
    }
}

/// Videos available for training, split by label.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub reals: Vec<Video>,
    pub fakes: Vec<Video>,
    pool: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        let (fakes, reals): (Vec<Video>, Vec<Video>) = videos.into_iter().partition(|v| v.label().is_fake());
        if reals.is_empty() {
            return Err(Error::EmptyDataset("training needs at least one real video".into()));
        }
        Ok(Self {
            reals,
            fakes,
            pool: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.reals.len() + self.fakes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn video(&self, idx: usize) -> &Video {
        if idx < self.reals.len() {
            &self.reals[idx]
        } else {
            &self.fakes[idx - self.reals.len()]
        }
    }

    /// Draws the per-epoch clip pool: `clips_per_video` random starts for every video.
    pub fn resample_pool(&mut self, clips_per_video: usize, clip_len: usize, rng: &mut impl Rng) -> Result<()> {
        self.pool = (0..self.len())
            .map(|i| {
                let v = self.video(i);
                training_starts(v.num_frames(), clips_per_video, clip_len, rng).map_err(|e| match e {
                    Error::TooShort { frames, required, .. } => Error::TooShort {
                        video_id: v.record.video_id.clone(),
                        frames,
                        required,
                    },
                    e => e,
                })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// `n` clip starts for a video, from the pool if one was drawn, else fresh.
    fn starts(&self, idx: usize, n: usize, clip_len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        match self.pool.get(idx) {
            Some(pool) if !pool.is_empty() => Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()),
            _ => training_starts(self.video(idx).num_frames(), n, clip_len, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    /// Videos drawn per iteration; each yields one real and one fake sample.
    pub batch_videos: usize,
    pub clips_per_iteration: usize,
    /// Probability a drawn video is a real one to be blended rather than a dataset fake.
    pub sam_prob: f64,
    pub max_blend_retries: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_videos: 4,
            clips_per_iteration: 1,
            sam_prob: 0.5,
            max_blend_retries: 8,
        }
    }
}

fn sample(video: &Video, starts: &[usize], clip_len: usize, origin: Origin) -> Result<BatchSample> {
    let clips = starts
        .iter()
        .map(|&s| video.clip(s, clip_len))
        .collect::<Result<Vec<_>>>()?;
    let masks = match video.label() {
        Label::Real => Some(
            clips
                .iter()
                .map(|c| BlendMask::zeros(c.len(), video.crop_size(), video.crop_size()))
                .collect(),
        ),
        Label::Fake => None,
    };
    Ok(BatchSample {
        video_id: video.record.video_id.clone(),
        label: video.label(),
        origin,
        domain: video.record.domain.clone(),
        clips,
        masks,
    })
}

/// Blends every clip of a real sample.
fn blend(real: &BatchSample, video: &Video, starts: &[usize], sam: &SamConfig, rng: &mut impl Rng) -> Result<BatchSample> {
    let mut clips = Vec::with_capacity(real.clips.len());
    let mut masks = Vec::with_capacity(real.clips.len());
    for (clip, &s) in real.clips.iter().zip(starts) {
        let landmarks = video.clip_landmarks(s, clip.len()).ok_or_else(|| Error::MalformedLandmarks {
            path: video.record.landmark_path.clone().unwrap_or_default(),
            reason: format!("real video {} has no landmarks to blend with", real.video_id),
        })?;
        let out = temporal_artifact_generate(clip, &landmarks, sam, rng)?;
        if out.mask.is_all_zero() {
            return Err(Error::DegenerateHull(format!("empty blend mask for {}", real.video_id)));
        }
        clips.push(out.clip);
        masks.push(out.mask);
    }
    Ok(BatchSample {
        video_id: real.video_id.clone(),
        label: Label::Fake,
        origin: Origin::SamBlend,
        domain: SAM_BLEND_DOMAIN.to_string(),
        clips,
        masks: Some(masks),
    })
}

/// Composes one batch. Each of `batch_videos` draws is either a real video, which
/// contributes itself as a real sample and its blend as a fake, or a dataset fake, which
/// contributes itself and a randomly chosen real video. A failed blend is retried with
/// another real video.
pub fn compose_batch(
    set: &TrainingSet,
    config: &BatchConfig,
    clip_len: usize,
    sam: &SamConfig,
    dfa: &DfaConfig,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if set.reals.is_empty() {
        return Err(Error::EmptyDataset("no real videos to compose a batch from".into()));
    }
    let n = config.clips_per_iteration;
    let nr = set.reals.len();
    let sam_prob = if set.fakes.is_empty() { 1.0 } else { config.sam_prob };
    let mut real = Vec::with_capacity(config.batch_videos);
    let mut fake = Vec::with_capacity(config.batch_videos);
    for _ in 0..config.batch_videos {
        if rng.random_bool(sam_prob) {
            let mut attempt = 0;
            loop {
                let idx = rng.random_range(0..nr);
                let video = &set.reals[idx];
                let starts = set.starts(idx, n, clip_len, rng)?;
                let r = sample(video, &starts, clip_len, Origin::Dataset)?;
                match blend(&r, video, &starts, sam, rng) {
                    Ok(b) => {
                        real.push(r);
                        fake.push(b);
                        break;
                    }
                    Err(e) => {
                        attempt += 1;
                        log::warn!("blend of {} failed ({e}); retrying with another video", r.video_id);
                        if attempt >= config.max_blend_retries.max(1) {
                            return Err(Error::BlendRetriesExhausted {
                                attempts: attempt,
                                last: e.to_string(),
                            });
                        }
                    }
                }
            }
        } else {
            let fi = rng.random_range(0..set.fakes.len());
            let starts = set.starts(nr + fi, n, clip_len, rng)?;
            fake.push(sample(&set.fakes[fi], &starts, clip_len, Origin::Dataset)?);
            let ri = rng.random_range(0..nr);
            let starts = set.starts(ri, n, clip_len, rng)?;
            real.push(sample(&set.reals[ri], &starts, clip_len, Origin::Dataset)?);
        }
    }
    let dfa = if dfa.enabled {
        let tags: Vec<&str> = fake.iter().map(|s| s.domain.as_str()).collect();
        Some(plan_dfa(&tags, dfa, rng)?)
    } else {
        None
    };
    Ok(TrainingBatch { real, fake, dfa })
}
