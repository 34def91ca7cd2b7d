//! Batch composition, the loss for one batch, and the optimization loop.

mod batch;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{compose_batch, BatchConfig, BatchSample, Origin, TrainingBatch, TrainingSet};
pub use optim::{cosine_lr, Adam, AdamState};

use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{DeepShieldModel, Head};
use crate::config::Config;
use crate::data::load_videos;
use crate::error::{Error, Result};
use crate::losses::{gfd_loss, global_clip_feature, overall_loss, scalar, LossConfig, SupconDenominator};
use crate::patch::{lpg_loss, patch_labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    /// 0 means one iteration per 8 videos, rounded up.
    pub iters_per_epoch: usize,
    pub batch_videos: usize,
    /// Clips drawn per video at the start of each epoch.
    pub clips_per_video: usize,
    /// Clips per video per iteration, taken from that epoch's draw.
    pub clips_per_iteration: usize,
    pub sam_prob: f64,
    pub max_blend_retries: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub precision: Precision,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            iters_per_epoch: 0,
            batch_videos: 4,
            clips_per_video: 4,
            clips_per_iteration: 1,
            sam_prob: 0.5,
            max_blend_retries: 8,
            learning_rate: 3e-4,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_videos", self.batch_videos),
            ("clips_per_video", self.clips_per_video),
            ("clips_per_iteration", self.clips_per_iteration),
            ("max_blend_retries", self.max_blend_retries),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("trainer.{key}"), "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.sam_prob) {
            return Err(Error::config("trainer.sam_prob", format!("must be in [0, 1], got {}", self.sam_prob)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("trainer.weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn batch(&self) -> BatchConfig {
        BatchConfig {
            batch_videos: self.batch_videos,
            clips_per_iteration: self.clips_per_iteration,
            sam_prob: self.sam_prob,
            max_blend_retries: self.max_blend_retries,
        }
    }

    pub fn iterations(&self, dataset_videos: usize) -> usize {
        if self.iters_per_epoch > 0 {
            self.iters_per_epoch
        } else {
            dataset_videos.div_ceil(8).max(1)
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.learning_rate, step, total),
            Schedule::Constant => self.learning_rate,
        }
    }
}

/// Loss terms of one batch, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub lpg: Tensor,
    pub cls: Tensor,
    pub supcon: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_lpg: f64,
    pub loss_cls: f64,
    pub loss_supcon: f64,
    pub grad_norm: f64,
}

/// Encodes a batch and evaluates the overall loss: patch loss on real and blended clips,
/// global loss on every encoded clip plus the DFA features.
pub fn batch_loss(model: &DeepShieldModel, batch: &TrainingBatch, losses: &LossConfig, dfa_stats_grad: bool) -> Result<LossTerms> {
    let samples: Vec<&BatchSample> = batch.encoded().collect();
    let n = samples
        .first()
        .map(|s| s.clips.len())
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    if samples.iter().any(|s| s.clips.len() != n) {
        return Err(Error::ShapeMismatch("samples have different clip counts".into()));
    }
    let clips: Vec<_> = samples.iter().flat_map(|s| &s.clips).collect();
    let features = model.encode(&model.clips_to_input(&clips)?)?;
    let (_, t, c) = features.class_embeddings.dims3()?;
    let s = samples.len();
    let per_sample = features.class_embeddings.reshape((s, n, t, c))?;

    let mut globals = vec![global_clip_feature(&per_sample.reshape((s, n * t, c))?)?];
    let nr = batch.real.len();
    let fake_groups = (0..batch.fake.len())
        .map(|k| per_sample.get(nr + k))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = fake_groups.iter().collect();
    for aug in batch.dfa_features(&refs, dfa_stats_grad)? {
        globals.push(global_clip_feature(&aug.features.reshape((1, n * t, c))?)?);
    }
    let global = Tensor::cat(&globals, 0)?;
    let probs = model.classify(&global, Head::Clip)?;
    let gfd = gfd_loss(&probs, &batch.labels(), &global, losses)?;

    let p = model.config().num_patches();
    let mut rows = Vec::new();
    let mut label_grids = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let Some(masks) = sample.masks.as_ref().filter(|_| i < nr || sample.is_blend()) else {
            continue;
        };
        for (j, mask) in masks.iter().enumerate() {
            rows.push((i * n + j) as u32);
            label_grids.push(patch_labels(mask, p, losses.theta())?.to_tensor(model.dtype(), model.device())?);
        }
    }
    let idx = Tensor::new(rows.as_slice(), model.device())?;
    let patch_feats = features.patch_embeddings.contiguous()?.index_select(&idx, 0)?;
    let patch_probs = model.classify(&patch_feats, Head::Patch)?;
    let lpg = lpg_loss(&patch_probs, &Tensor::stack(&label_grids, 0)?)?;

    Ok(LossTerms {
        total: overall_loss(&lpg, &gfd.total, losses.omega)?,
        lpg,
        cls: gfd.cls,
        supcon: gfd.supcon,
    })
}

/// One optimizer update on `batch` at learning rate `lr`.
pub fn train_step(
    model: &DeepShieldModel,
    batch: &TrainingBatch,
    optimizer: &mut Adam,
    config: &Config,
    lr: f64,
) -> Result<StepMetrics> {
    let terms = batch_loss(model, batch, &config.losses, config.dfa.stats_grad)?;
    let values = [
        scalar(&terms.total)?,
        scalar(&terms.lpg)?,
        scalar(&terms.cls)?,
        scalar(&terms.supcon)?,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: optimizer.steps_taken() as usize,
            detail: format!(
                "total={} lpg={} cls={} supcon={}",
                values[0], values[1], values[2], values[3]
            ),
        });
    }
    let grads = terms.total.backward()?;
    optimizer.lr = lr;
    let grad_norm = optimizer.step(model.params(), &grads)?;
    Ok(StepMetrics {
        step: optimizer.steps_taken() as usize - 1,
        epoch: 0,
        lr,
        loss_total: values[0],
        loss_lpg: values[1],
        loss_cls: values[2],
        loss_supcon: values[3],
        grad_norm,
    })
}

/// Position of the trainer in its run, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub global_step: usize,
    pub rng_word_pos: String,
    pub optimizer: AdamState,
}

pub struct Trainer {
    pub model: DeepShieldModel,
    pub optimizer: Adam,
    pub config: Config,
    pub epoch: usize,
    pub global_step: usize,
    rng: ChaCha8Rng,
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.trainer.seed;
        let model = DeepShieldModel::new(config.encoder.clone(), config.trainer.precision.dtype(), &Device::Cpu, seed)?;
        if let Some(path) = &config.encoder.pretrained_weights {
            let n = model.load_pretrained(path)?;
            log::info!("loaded {n} pretrained tensors from {}", path.display());
        }
        log::info!(
            "{:.2}% of {} parameters trainable",
            100.0 * model.trainable_fraction(),
            model.params().counts().1
        );
        Ok(Self {
            model,
            optimizer: Adam::new(config.trainer.learning_rate, config.trainer.weight_decay),
            rng: batch_rng(seed),
            config,
            epoch: 0,
            global_step: 0,
        })
    }

    /// Restores model, optimizer, schedule position and sampling state from a checkpoint.
    pub fn resume(config: Config, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let saved = saved_config(&ckpt, path)?;
        if saved.encoder != config.encoder {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint {} was trained with a different encoder config",
                path.display()
            )));
        }
        let state: TrainerState = serde_json::from_str(&ckpt.state).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("state: {e}"),
        })?;
        let mut trainer = Self::new(config)?;
        ckpt.restore_model(&trainer.model)?;
        trainer.optimizer.restore(&state.optimizer, &ckpt.tensors, trainer.model.params())?;
        let pos: u128 = state.rng_word_pos.parse().map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("bad rng position {:?}", state.rng_word_pos),
        })?;
        trainer.rng.set_word_pos(pos);
        trainer.epoch = state.epoch;
        trainer.global_step = state.global_step;
        Ok(trainer)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            global_step: self.global_step,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            optimizer: self.optimizer.state(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let state = serde_json::to_string(&self.state()).expect("trainer state serializes");
        let mut ckpt = Checkpoint::from_model(&self.model, config, state);
        for (name, t) in self.optimizer.moments() {
            ckpt.insert(name, t.clone());
        }
        ckpt.save(path)
    }

    pub fn compose(&mut self, set: &TrainingSet) -> Result<TrainingBatch> {
        compose_batch(
            set,
            &self.config.trainer.batch(),
            self.config.encoder.num_frames,
            &self.config.sam,
            &self.config.dfa,
            &mut self.rng,
        )
    }

    /// Trains until the configured epoch count, writing `metrics.jsonl` and checkpoints
    /// under `out_dir`. Returns the last checkpoint written.
    pub fn run(
        &mut self,
        set: &mut TrainingSet,
        out_dir: &Path,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Option<PathBuf>> {
        let tc = self.config.trainer.clone();
        let iters = tc.iterations(set.len());
        let total = tc.epochs * iters;
        let ckpt_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "training {} epochs x {iters} iterations on {} real / {} fake videos, contrastive denominator: {:?}",
            tc.epochs,
            set.reals.len(),
            set.fakes.len(),
            self.config.losses.supcon_denominator
        );
        if self.config.losses.supcon_denominator == SupconDenominator::Paper {
            log::warn!("contrastive denominator sums over positives only; it is minimized by collapsing each class");
        }
        let mut warned_degenerate = false;
        let mut last = None;
        while self.epoch < tc.epochs {
            set.resample_pool(tc.clips_per_video, self.config.encoder.num_frames, &mut self.rng)?;
            for _ in 0..iters {
                let batch = self.compose(set)?;
                if !warned_degenerate && batch.dfa.as_ref().is_some_and(|p| p.degenerate) {
                    log::warn!("fake samples share one domain; DFA pairs within it");
                    warned_degenerate = true;
                }
                let lr = tc.lr_at(self.global_step, total);
                let mut m = train_step(&self.model, &batch, &mut self.optimizer, &self.config, lr).map_err(|e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                        step: self.global_step,
                        detail,
                    },
                    e => e,
                })?;
                m.step = self.global_step;
                m.epoch = self.epoch;
                write_metrics(&mut metrics, &metrics_path, &m)?;
                on_step(&m);
                self.global_step += 1;
            }
            self.epoch += 1;
            if self.epoch % tc.checkpoint_every == 0 || self.epoch == tc.epochs {
                let path = ckpt_dir.join(format!("epoch_{:04}.safetensors", self.epoch));
                self.save_checkpoint(&path)?;
                last = Some(path);
            }
        }
        Ok(last)
    }
}

fn write_metrics(file: &mut File, path: &Path, m: &StepMetrics) -> Result<()> {
    let line = serde_json::to_string(m).expect("metrics serialize");
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

fn saved_config(ckpt: &Checkpoint, path: &Path) -> Result<Config> {
    serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("config: {e}"),
    })
}

/// Rebuilds a trained model, and the config it was trained with, from a checkpoint.
pub fn load_model(path: &Path) -> Result<(DeepShieldModel, Config)> {
    let ckpt = Checkpoint::load(path)?;
    let config = saved_config(&ckpt, path)?;
    let model = DeepShieldModel::new(
        config.encoder.clone(),
        config.trainer.precision.dtype(),
        &Device::Cpu,
        config.trainer.seed,
    )?;
    ckpt.restore_model(&model)?;
    Ok((model, config))
}

/// Loads the training videos named by the config's dataset section.
pub fn load_training_set(config: &Config) -> Result<TrainingSet> {
    TrainingSet::new(load_videos(
        &config.dataset.root,
        config.encoder.image_size,
        config.dataset.preload,
    )?)
}

/// Trains from scratch, or from `resume`, writing everything under `out_dir`.
pub fn train(config: Config, out_dir: &Path, resume: Option<&Path>) -> Result<Option<PathBuf>> {
    let mut set = load_training_set(&config)?;
    config.echo(out_dir)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, path)?,
        None => Trainer::new(config)?,
    };
    trainer.run(&mut set, out_dir, |m| {
        log::info!(
            "step {} epoch {} lr {:.3e} loss {:.4} (lpg {:.4} cls {:.4} supcon {:.4})",
            m.step,
            m.epoch,
            m.lr,
            m.loss_total,
            m.loss_lpg,
            m.loss_cls,
            m.loss_supcon
        )
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::Label;
    use crate::synth::synthesize_videos;

    /// A config small enough for a training step to take well under a second.
    pub(crate) fn tiny_config() -> Config {
        let mut c = Config::with_preset("toy").unwrap();
        c.encoder.image_size = 32;
        c.encoder.patch_size = 8;
        c.encoder.embed_dim = 32;
        c.encoder.depth = 1;
        c.encoder.num_heads = 2;
        c.encoder.adapter_bottleneck = 8;
        c.encoder.num_frames = 4;
        c.generate.real = 4;
        c.generate.fake = 2;
        c.generate.frames = 48;
        c.generate.image_size = 32;
        c.trainer.epochs = 2;
        c.trainer.iters_per_epoch = 1;
        c.trainer.batch_videos = 2;
        c.trainer.clips_per_video = 2;
        c.trainer.precision = Precision::F64;
        c
    }

    pub(crate) fn tiny_set(c: &Config) -> TrainingSet {
        let videos = synthesize_videos(&c.generate, &c.sam)
            .unwrap()
            .into_iter()
            .map(|v| v.into_video().unwrap())
            .collect();
        TrainingSet::new(videos).unwrap()
    }

    fn run_steps(c: &Config, out: &Path) -> (Vec<StepMetrics>, Trainer) {
        let mut set = tiny_set(c);
        let mut t = Trainer::new(c.clone()).unwrap();
        let mut log = Vec::new();
        t.run(&mut set, out, |m| log.push(m.clone())).unwrap();
        (log, t)
    }

    fn param_values(t: &Trainer) -> Vec<Vec<f64>> {
        t.model
            .params()
            .iter()
            .map(|(_, p)| p.t().flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .collect()
    }

    #[test]
    fn seeded_runs_are_identical() {
        let c = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, t1) = run_steps(&c, d1.path());
        let (m2, t2) = run_steps(&c, d2.path());
        assert_eq!(m1.len(), 2);
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.loss_total, b.loss_total);
            assert_eq!(a.grad_norm, b.grad_norm);
        }
        assert_eq!(param_values(&t1), param_values(&t2));
        assert!(d1.path().join("checkpoints/epoch_0002.safetensors").exists());
        let lines = std::fs::read_to_string(d1.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn batch_has_expected_composition() {
        let c = tiny_config();
        let set = tiny_set(&c);
        let mut t = Trainer::new(c).unwrap();
        for _ in 0..5 {
            let b = t.compose(&set).unwrap();
            assert_eq!(b.real.len(), 2);
            assert_eq!(b.fake.len(), 2);
            assert_eq!(b.num_dfa(), 4);
            assert_eq!(b.labels(), [0, 0, 1, 1, 1, 1, 1, 1]);
            assert!(b.real.iter().all(|s| s.label == Label::Real));
        }
    }

    #[test]
    fn zero_weights_leave_only_classification() {
        let mut c = tiny_config();
        c.losses.omega = 0.0;
        c.losses.upsilon = 0.0;
        let set = tiny_set(&c);
        let mut t = Trainer::new(c.clone()).unwrap();
        let b = t.compose(&set).unwrap();
        let terms = batch_loss(&t.model, &b, &c.losses, false).unwrap();
        assert_eq!(scalar(&terms.total).unwrap(), scalar(&terms.cls).unwrap());
    }

    #[test]
    fn total_is_weighted_sum() {
        let c = tiny_config();
        let set = tiny_set(&c);
        let mut t = Trainer::new(c.clone()).unwrap();
        let b = t.compose(&set).unwrap();
        let terms = batch_loss(&t.model, &b, &c.losses, false).unwrap();
        let [total, lpg, cls, supcon] = [&terms.total, &terms.lpg, &terms.cls, &terms.supcon].map(|x| scalar(x).unwrap());
        let expected = cls + c.losses.upsilon * supcon + c.losses.omega * lpg;
        assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
    }

    #[test]
    fn dataset_fakes_do_not_reach_patch_loss() {
        let mut c = tiny_config();
        c.trainer.sam_prob = 0.0;
        let set = tiny_set(&c);
        let mut t = Trainer::new(c.clone()).unwrap();
        let b = t.compose(&set).unwrap();
        assert!(b.fake.iter().all(|s| s.origin == Origin::Dataset && s.masks.is_none()));
        let patch_grad = |batch: &TrainingBatch| {
            let terms = batch_loss(&t.model, batch, &c.losses, false).unwrap();
            let grads = terms.total.backward().unwrap();
            let w = t.model.params().get("heads.patch.weight").unwrap();
            grads.get(w.var().as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let before = patch_grad(&b);
        let mut perturbed = b.clone();
        for s in &mut perturbed.fake {
            for clip in &mut s.clips {
                for f in &mut clip.frames {
                    let inverted = f.pixels().iter().map(|v| 1.0 - v).collect();
                    *f = crate::data::Frame::new(f.height(), f.width(), inverted).unwrap();
                }
            }
        }
        let after = patch_grad(&perturbed);
        assert!(before.iter().any(|&g| g != 0.0));
        assert_eq!(before, after);
    }

    #[test]
    fn resume_continues_the_same_run() {
        let c = tiny_config();
        let full = tempfile::tempdir().unwrap();
        let (m_full, t_full) = run_steps(&c, full.path());

        let mut first = c.clone();
        first.trainer.epochs = 1;
        let part = tempfile::tempdir().unwrap();
        let (m1, _) = run_steps(&first, part.path());
        let ckpt = part.path().join("checkpoints/epoch_0001.safetensors");
        let mut set = tiny_set(&c);
        let mut resumed = Trainer::resume(c.clone(), &ckpt).unwrap();
        assert_eq!(resumed.global_step, 1);
        let mut m2 = Vec::new();
        resumed.run(&mut set, part.path(), |m| m2.push(m.clone())).unwrap();

        assert_eq!(m1[0].loss_total, m_full[0].loss_total);
        assert_eq!(m2.len(), 1);
        assert_eq!(m2[0].step, 1);
        assert_eq!(m2[0].loss_total, m_full[1].loss_total);
        assert_eq!(param_values(&resumed), param_values(&t_full));
    }

    #[test]
    fn resume_rejects_other_encoder() {
        let mut c = tiny_config();
        c.trainer.epochs = 1;
        let d = tempfile::tempdir().unwrap();
        run_steps(&c, d.path());
        let mut other = c.clone();
        other.encoder.depth = 2;
        let err = Trainer::resume(other, &d.path().join("checkpoints/epoch_0001.safetensors")).err().unwrap();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }
}
