//! Acceptance suite. Each criterion prints one PASS/FAIL line; the binary exits non-zero if
//! any fails. Run a subset with `ACCEPTANCE=A1,A3 cargo test --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepshield::backbone::{ClsMode, ParamStore, StAdapter};
use deepshield::data::{BlendMask, Frame, Label};
use deepshield::dfa::{bfg_transform, channel_stats, dfg_transform, mix_stats, DfaConfig};
use deepshield::eval::{auc, evaluate, video_auc, VideoPrediction};
use deepshield::losses::{cls_loss, scalar, supcon_loss, SupconDenominator};
use deepshield::patch::{lpg_loss, patch_labels};
use deepshield::sam::blend_frames;
use deepshield::synth::{generate_synthetic_dataset, synthesize_videos};
use deepshield::trainer::{batch_loss, compose_batch, load_model, train, BatchConfig, Trainer, TrainingSet};
use deepshield::data::load_videos;
use deepshield::Config;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    check(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------------------

/// Brute-force labels: count non-zero pixels of each patch with a plain double loop.
fn label_oracle(mask: &[f32], size: usize, grid: usize, theta: usize) -> Vec<u8> {
    let side = size / grid;
    let mut out = vec![0u8; grid * grid];
    for (p, label) in out.iter_mut().enumerate() {
        let (pr, pc) = (p / grid, p % grid);
        let mut count = 0;
        for r in 0..side {
            for c in 0..side {
                if mask[(pr * side + r) * size + pc * side + c] > 0.0 {
                    count += 1;
                }
            }
        }
        *label = u8::from(count >= theta);
    }
    out
}

fn a1_patch_labels() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (size, grid) = (64, 8);
    let mut compared = 0;
    for i in 0..1000 {
        // soft masks with a mix of exact zeros, blurred-looking ramps and saturated ones
        let density: f32 = rng.random();
        let mask: Vec<f32> = (0..size * size)
            .map(|_| {
                if rng.random::<f32>() < density {
                    rng.random_range(0.0..=1.0f32)
                } else {
                    0.0
                }
            })
            .collect();
        let m = BlendMask::from_frames(size, size, vec![mask.clone()]).map_err(err)?;
        for theta in [1, 10, 50] {
            let got = patch_labels(&m, grid * grid, theta).map_err(err)?;
            let want = label_oracle(&mask, size, grid, theta);
            check(got.labels == want, || format!("mask {i}, theta {theta}: labels differ"))?;
            compared += want.len();
        }
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("{compared} patch labels match the oracle"))
}

fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Frame {
    Frame::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn a2_blend_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let size = 32;
    for i in 0..100 {
        let inner = random_frame(&mut rng, size);
        let outer = random_frame(&mut rng, size);
        let zeros = vec![0.0; size * size];
        let ones = vec![1.0; size * size];
        check(blend_frames(&inner, &outer, &zeros).map_err(err)? == outer, || format!("frame {i}: mask 0 != outer"))?;
        check(blend_frames(&inner, &outer, &ones).map_err(err)? == inner, || format!("frame {i}: mask 1 != inner"))?;
        let mask: Vec<f32> = (0..size * size).map(|_| rng.random()).collect();
        let out = blend_frames(&inner, &outer, &mask).map_err(err)?;
        for (k, ((&o, &a), &b)) in out.pixels().iter().zip(inner.pixels()).zip(outer.pixels()).enumerate() {
            let (lo, hi) = (a.min(b), a.max(b));
            check(o >= lo - 1e-6 && o <= hi + 1e-6, || {
                format!("frame {i} value {k}: {o} outside [{lo}, {hi}]")
            })?;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok("endpoints bit-exact, convex on 100 frames".into())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
}

fn a3_dfa_stats() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alpha = DfaConfig::default().alpha;
    let mut worst: f64 = 0.0;
    for g in 0..100 {
        let (n, t, c) = (rng.random_range(1..5), rng.random_range(2..9), rng.random_range(4..40));
        let scale_a: f64 = rng.random_range(0.1..3.0);
        let scale_b: f64 = rng.random_range(0.1..3.0);
        let fa = (Tensor::randn(0f64, scale_a, (n, t, c), &Device::Cpu).map_err(err)? + rng.random_range(-2.0..2.0))
            .map_err(err)?;
        let fb = (Tensor::randn(0f64, scale_b, (n, t, c), &Device::Cpu).map_err(err)? + rng.random_range(-2.0..2.0))
            .map_err(err)?;
        let lambda: f64 = rng.random();
        let (sa, sb) = (channel_stats(&fa).map_err(err)?, channel_stats(&fb).map_err(err)?);
        let mixed = mix_stats(&sa, &sb, lambda).map_err(err)?;

        let dfg = channel_stats(&dfg_transform(&fa, &sa, &mixed).map_err(err)?).map_err(err)?;
        let bfg = channel_stats(&bfg_transform(&fa, &sa, alpha).map_err(err)?).map_err(err)?;
        let expanded_sigma = (&sa.sigma * alpha).map_err(err)?;
        let errors = [
            max_abs_diff(&dfg.mu, &mixed.mu),
            max_abs_diff(&dfg.sigma, &mixed.sigma),
            max_abs_diff(&bfg.mu, &sa.mu),
            max_abs_diff(&bfg.sigma, &expanded_sigma),
        ];
        for e in errors {
            worst = worst.max(e);
            check(e < 1e-5, || format!("group {g}: statistic off by {e:e}"))?;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("100 groups, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------------------

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grad` of `f` at `x` against central differences at up to `coords` entries.
fn fd_check(
    name: &str,
    x: &Var,
    f: &dyn Fn(&Tensor) -> Tensor,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, String> {
    let loss = f(x.as_tensor());
    let grads = loss.backward().map_err(err)?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| format!("{name}: no gradient"))?
        .flatten_all()
        .map_err(err)?
        .to_vec1::<f64>()
        .map_err(err)?;
    let base = x.as_tensor().flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?;
    let shape = x.as_tensor().shape().clone();
    let eps = 1e-6;
    let eval = |v: Vec<f64>| scalar(&f(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap())).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..base.len());
        let (mut up, mut down) = (base.clone(), base.clone());
        up[i] += eps;
        down[i] -= eps;
        let numeric = (eval(up) - eval(down)) / (2.0 * eps);
        let e = rel_err(g[i], numeric);
        worst = worst.max(e);
        check(e < 1e-4, || format!("{name}[{i}]: analytic {} vs numeric {numeric}", g[i]))?;
    }
    Ok(worst)
}

fn a4_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dev = Device::Cpu;
    let mut worst: f64 = 0.0;

    let probs = Var::from_tensor(&Tensor::rand(0.05f64, 0.95, (6, 16), &dev).map_err(err)?).map_err(err)?;
    let labels = Tensor::new(
        (0..96).map(|i| f64::from(u8::from(i % 3 == 0))).collect::<Vec<_>>().as_slice(),
        &dev,
    )
    .map_err(err)?
    .reshape((6, 16))
    .map_err(err)?;
    worst = worst.max(fd_check("lpg_loss", &probs, &|p| lpg_loss(p, &labels).unwrap(), 20, &mut rng)?);

    let clip_probs = Var::from_tensor(&Tensor::rand(0.05f64, 0.95, 16, &dev).map_err(err)?).map_err(err)?;
    let clip_labels = labels.narrow(0, 0, 1).map_err(err)?.squeeze(0).map_err(err)?;
    worst = worst.max(fd_check("cls_loss", &clip_probs, &|p| cls_loss(p, &clip_labels).unwrap(), 20, &mut rng)?);

    let features = Var::from_tensor(&Tensor::randn(0f64, 1.0, (16, 12), &dev).map_err(err)?).map_err(err)?;
    let sc_labels: Vec<u8> = (0..16).map(|i| u8::from(i >= 4)).collect();
    for (mode, name) in [
        (SupconDenominator::Paper, "supcon_loss[paper]"),
        (SupconDenominator::Standard, "supcon_loss[standard]"),
    ] {
        let f = |x: &Tensor| supcon_loss(x, &sc_labels, 0.5, mode, true).unwrap();
        worst = worst.max(fd_check(name, &features, &f, 20, &mut rng)?);
    }

    worst = worst.max(full_loss_check(&mut rng)?);
    within(Duration::from_secs(60), start)?;
    Ok(format!("6 checks x 20 coordinates, worst relative error {worst:.1e}"))
}

/// Finite differences of the complete training loss with respect to model parameters.
fn full_loss_check(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut c = Config::with_preset("toy").map_err(err)?;
    c.trainer.precision = deepshield::trainer::Precision::F64;
    c.trainer.batch_videos = 1;
    c.trainer.sam_prob = 1.0;
    c.dfa.stats_grad = true;
    c.generate.real = 2;
    c.generate.fake = 1;
    c.generate.frames = 48;
    let videos = synthesize_videos(&c.generate, &c.sam)
        .map_err(err)?
        .into_iter()
        .map(|v| v.into_video())
        .collect::<deepshield::Result<Vec<_>>>()
        .map_err(err)?;
    let set = TrainingSet::new(videos).map_err(err)?;
    let mut trainer = Trainer::new(c.clone()).map_err(err)?;
    let batch = trainer.compose(&set).map_err(err)?;
    let model = &trainer.model;
    // move every parameter off its initial value so zero-initialized heads and adapters do
    // not hide the gradient of everything behind them
    for (name, p) in model.params().iter() {
        let noise = Tensor::randn(0f64, 0.05, p.t().shape(), &Device::Cpu).map_err(err)?;
        model.params().assign(name, &(p.t() + noise).map_err(err)?.detach()).map_err(err)?;
    }
    let loss = || batch_loss(model, &batch, &c.losses, true).and_then(|t| scalar(&t.total));
    let terms = batch_loss(model, &batch, &c.losses, true).map_err(err)?;
    let grads = terms.total.backward().map_err(err)?;
    let params: Vec<(String, Tensor)> = model.params().iter().map(|(n, p)| (n.clone(), p.t().copy().unwrap())).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (name, value) = &params[rng.random_range(0..params.len())];
        let analytic_all = grads
            .get(model.params().get(name).unwrap().var().as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let base = value.flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?;
        let i = rng.random_range(0..base.len());
        let analytic = analytic_all.map_or(0.0, |g| g[i]);
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tensor::from_vec(v, value.shape(), &Device::Cpu).map_err(err)?;
            model.params().assign(name, &t).map_err(err)?;
            loss().map_err(err)
        };
        let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
        model.params().assign(name, value).map_err(err)?;
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        check(e < 1e-4, || format!("train loss wrt {name}[{i}]: analytic {analytic} vs numeric {numeric}"))?;
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------------------

/// Synthetic train and test splits written to disk, as a user would produce them.
fn toy_datasets(root: &Path, config: &Config) -> deepshield::Result<()> {
    let mut spec = config.generate.clone();
    generate_synthetic_dataset(&spec, &config.sam, &root.join("train"), false)?;
    spec.seed += 1000;
    generate_synthetic_dataset(&spec, &config.sam, &root.join("test"), false)?;
    Ok(())
}

const A5_CONFIG: &str = include_str!("../../../configs/toy.toml");

fn a5_toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut config = Config::from_toml_str(A5_CONFIG, &[]).map_err(err)?;
    config.dataset.root = dir.path().join("train");
    config.dataset.test_root = dir.path().join("test");
    toy_datasets(dir.path(), &config).map_err(err)?;
    let steps = config.trainer.epochs * config.trainer.iters_per_epoch;
    check(steps <= 1000, || format!("{steps} steps configured"))?;

    let run = dir.path().join("run");
    let ckpt = train(config.clone(), &run, None)
        .map_err(err)?
        .ok_or("no checkpoint written")?;
    let (model, _) = load_model(&ckpt).map_err(err)?;
    let test = load_videos(&config.dataset.test_root, model.config().image_size, true).map_err(err)?;
    let report = evaluate(&model, &test, &config.eval, config.losses.theta()).map_err(err)?;
    let patch_auc = report.patch_auc.ok_or("no patch AUC (no masked test videos)")?;
    let summary = format!(
        "{steps} steps, video AUC {:.3}, patch AUC {patch_auc:.3}, {:.0?}",
        report.auc,
        start.elapsed()
    );
    check(report.auc >= 0.90, || format!("video AUC below 0.90: {summary}"))?;
    check(patch_auc >= 0.85, || format!("patch AUC below 0.85: {summary}"))?;
    check(start.elapsed() <= Duration::from_secs(15 * 60), || format!("over 15 min: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------------------

fn a6_temporal_receptive_field() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let (t, n, c) = (9, 5, 16);
    let adapters: Vec<StAdapter> = (0..2)
        .map(|i| StAdapter::new(&mut store, &format!("a{i}"), c, 8, ClsMode::Temporal, &mut rng).unwrap())
        .collect();
    // a zero up-projection makes the adapter the identity; give it real weights
    for i in 0..2 {
        let w = Tensor::randn(0f64, 0.5, (c, 8), &Device::Cpu).map_err(err)?;
        store.assign(&format!("a{i}.up.weight"), &w).map_err(err)?;
    }
    let x = Tensor::randn(0f64, 1.0, (t, n, c), &Device::Cpu).map_err(err)?;
    let apply = |x: &Tensor, k: usize| -> Tensor {
        adapters[..k].iter().fold(x.clone(), |h, a| a.forward_clip(&h).unwrap())
    };
    for k in [1, 2] {
        for t0 in [0, 4, 8] {
            let bump = Tensor::zeros((t, n, c), DType::F64, &Device::Cpu)
                .and_then(|z| z.slice_assign(&[t0..t0 + 1, 0..n, 0..c], &Tensor::ones((1, n, c), DType::F64, &Device::Cpu)?))
                .map_err(err)?;
            let x2 = (&x + bump).map_err(err)?;
            let diff = (apply(&x2, k) - apply(&x, k)).map_err(err)?.abs().map_err(err)?;
            let per_frame = diff.max(2).and_then(|d| d.max(1)).and_then(|d| d.to_vec1::<f64>()).map_err(err)?;
            for (f, &d) in per_frame.iter().enumerate() {
                let reach = f.abs_diff(t0);
                if reach > k {
                    check(d == 0.0, || format!("k={k}: perturbing frame {t0} changed frame {f} by {d:e}"))?;
                } else {
                    check(d > 0.0, || format!("k={k}: frame {f} within reach of {t0} unchanged"))?;
                }
            }
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok("reach is exactly +-k frames for k = 1, 2".into())
}

fn a7_batch_composition() -> Outcome {
    let start = Instant::now();
    let mut config = Config::with_preset("toy").map_err(err)?;
    config.generate.real = 6;
    config.generate.fake = 6;
    config.generate.frames = 48;
    let videos = synthesize_videos(&config.generate, &config.sam)
        .map_err(err)?
        .into_iter()
        .map(|v| v.into_video())
        .collect::<deepshield::Result<Vec<_>>>()
        .map_err(err)?;
    let mut set = TrainingSet::new(videos).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = config.encoder.num_frames;
    let batch_cfg: BatchConfig = config.trainer.batch();
    let mut blends = 0;
    // stand-in encoder: each clip maps to a random (T, C) class-embedding block
    let stub = |n: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n * t * 4).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (n, t, 4), &Device::Cpu).unwrap()
    };
    for b in 0..10_000 {
        if b % 100 == 0 {
            set.resample_pool(config.trainer.clips_per_video, t, &mut rng).map_err(err)?;
        }
        let batch = compose_batch(&set, &batch_cfg, t, &config.sam, &config.dfa, &mut rng).map_err(err)?;
        check(batch.real.len() == 4 && batch.fake.len() == 4 && batch.num_dfa() == 8, || {
            format!(
                "batch {b}: {} real, {} fake, {} dfa",
                batch.real.len(),
                batch.fake.len(),
                batch.num_dfa()
            )
        })?;
        let labels = batch.labels();
        check(labels.len() == 16 && labels[..4] == [0; 4] && labels[4..] == [1; 12], || {
            format!("batch {b}: labels {labels:?}")
        })?;
        for s in &batch.real {
            check(s.label == Label::Real, || format!("batch {b}: fake in real slot"))?;
            let masks = s.masks.as_ref().ok_or_else(|| format!("batch {b}: real sample without mask"))?;
            check(masks.iter().all(|m| m.is_all_zero()), || format!("batch {b}: real sample with non-zero mask"))?;
        }
        for s in &batch.fake {
            check(s.label == Label::Fake, || format!("batch {b}: real in fake slot"))?;
            match (s.is_blend(), &s.masks) {
                (true, Some(masks)) => {
                    blends += 1;
                    check(masks.iter().all(|m| !m.is_all_zero() && m.frames() == t), || {
                        format!("batch {b}: blend with empty or misshapen mask")
                    })?;
                }
                (false, None) => {}
                _ => return Err(format!("batch {b}: mask presence does not match sample origin")),
            }
        }
        let groups: Vec<Tensor> = batch.fake.iter().map(|s| stub(s.clips.len(), &mut rng)).collect();
        let refs: Vec<&Tensor> = groups.iter().collect();
        let aug = batch.dfa_features(&refs, false).map_err(err)?;
        check(aug.len() == 8, || format!("batch {b}: {} DFA outputs", aug.len()))?;
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("10000 batches, {blends} blended fakes"))
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn a8_auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for s in 0..1000 {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(2..12);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let predictions: Vec<VideoPrediction> = labels
            .iter()
            .enumerate()
            .map(|(i, &fake)| {
                // coarse score levels produce plenty of ties
                let score = f64::from(rng.random_range(0..levels)) / f64::from(levels);
                let label = if fake { Label::Fake } else { Label::Real };
                VideoPrediction::from_clip_probs(format!("v{i}"), vec![score], label)
            })
            .collect();
        let scores: Vec<f64> = predictions.iter().map(|p| p.video_prob).collect();
        let got = video_auc(&predictions).map_err(err)?;
        let direct = auc(&scores, &labels).map_err(err)?;
        let want = brute_force_auc(&scores, &labels);
        let d = (got - want).abs().max((direct - want).abs());
        worst = worst.max(d);
        check(d < 1e-9, || format!("set {s}: {got} vs brute force {want}"))?;
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("1000 score sets, max |diff| {worst:.1e}"))
}

/// Smoke-run settings shared by every sweep point: a small encoder with 16x16 patches so
/// that thresholds up to 150 pixels are meaningful.
const SMOKE_BASE: &str = r#"
[encoder]
preset = "toy"
image_size = 64
patch_size = 16
embed_dim = 32
depth = 1
num_heads = 2
adapter_bottleneck = 8
num_frames = 4

[generate]
real = 4
fake = 2
frames = 48

[trainer]
epochs = 1
iters_per_epoch = 10
batch_videos = 2
"#;

fn a9_config_sweeps() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut sweep: Vec<(String, String)> = [10, 20, 50, 100, 150]
        .iter()
        .map(|theta| (format!("theta_{theta}"), format!("[losses]\ntheta = {theta}\n")))
        .collect();
    for (omega, upsilon) in [(0.5, 0.5), (1.0, 0.5), (5.0, 0.5), (0.5, 1.0), (0.5, 5.0)] {
        sweep.push((
            format!("omega_{omega}_upsilon_{upsilon}"),
            format!("[losses]\nomega = {omega:?}\nupsilon = {upsilon:?}\n"),
        ));
    }
    let mut shared: Option<TrainingSet> = None;
    let mut lines = Vec::new();
    for (name, body) in &sweep {
        // one file per sweep point: the shared smoke settings plus the swept keys
        let text = merge_sections(SMOKE_BASE, body);
        let path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, &text).map_err(err)?;
        let config = Config::load(Some(&path), &[]).map_err(|e| format!("{name}: {e}"))?;
        if shared.is_none() {
            let videos = synthesize_videos(&config.generate, &config.sam)
                .map_err(err)?
                .into_iter()
                .map(|v| v.into_video())
                .collect::<deepshield::Result<Vec<_>>>()
                .map_err(err)?;
            shared = Some(TrainingSet::new(videos).map_err(err)?);
        }
        let mut set = shared.clone().expect("set built above");
        let mut trainer = Trainer::new(config.clone()).map_err(err)?;
        let mut steps = Vec::new();
        let out = dir.path().join(name);
        trainer
            .run(&mut set, &out, |m| steps.push(m.loss_total))
            .map_err(|e| format!("{name}: {e}"))?;
        check(steps.len() == 10 && steps.iter().all(|l| l.is_finite()), || {
            format!("{name}: {} steps, losses {steps:?}", steps.len())
        })?;
        check(out.join("checkpoints/epoch_0001.safetensors").exists(), || format!("{name}: no checkpoint"))?;
        lines.push(name.clone());
    }
    within(Duration::from_secs(300), start)?;
    Ok(format!("{} sweep configs each ran 10 steps", lines.len()))
}

/// Appends `extra`'s `[section]` keys into `base`, inserting a new section when needed.
fn merge_sections(base: &str, extra: &str) -> String {
    let mut table: toml::Table = base.parse().unwrap();
    let extra: toml::Table = extra.parse().unwrap();
    for (section, values) in extra {
        let dst = table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .unwrap();
        for (k, v) in values.as_table().unwrap() {
            dst.insert(k.clone(), v.clone());
        }
    }
    toml::to_string(&table).unwrap()
}

// ---------------------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "patch labeling oracle", a1_patch_labels),
        ("A2", "blend identity and convexity", a2_blend_identity),
        ("A3", "DFA statistics", a3_dfa_stats),
        ("A4", "gradient checks", a4_gradients),
        ("A5", "toy end-to-end", a5_toy_end_to_end),
        ("A6", "temporal receptive field", a6_temporal_receptive_field),
        ("A7", "batch composition", a7_batch_composition),
        ("A8", "AUC oracle", a8_auc_oracle),
        ("A9", "config sweeps", a9_config_sweeps),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("{id} PASS  {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL  {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
