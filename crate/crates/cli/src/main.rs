use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use deepshield::config::extract_overrides;
use deepshield::data::{load_videos, Label, Video};
use deepshield::eval::{emit_patch_heatmap, evaluate};
use deepshield::patch::patch_labels;
use deepshield::sam::temporal_artifact_generate;
use deepshield::synth::generate_synthetic_dataset;
use deepshield::trainer::{load_model, train};
use deepshield::{Config, Error};

/// Deepfake video detection: synthetic data, blending, training and evaluation.
///
/// Any config key can be overridden with `--section.key value`, e.g. `--losses.theta 20`.
#[derive(Parser, Debug)]
#[command(name = "deepshield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; keys it leaves out keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed for this command
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural face-video dataset with blended fakes
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replace the output directory if it exists
        #[arg(long)]
        force: bool,
    },
    /// Blend one clip of a real video and write its frames, mask and patch labels
    Blend {
        #[command(flatten)]
        common: Common,
        /// Dataset root (defaults to dataset.root)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Video id (defaults to the first real video)
        #[arg(long)]
        video: Option<String>,
        /// First frame of the clip
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Train a model, writing metrics and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a dataset with a checkpoint and report video-level AUC
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (defaults to dataset.test_root)
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write patch-probability heatmaps for one clip
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (defaults to dataset.test_root)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Video id (defaults to the first video)
        #[arg(long)]
        video: Option<String>,
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = extract_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = json!({"error": "usage", "message": e.to_string().trim_end()});
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &overrides) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_json(e: &Error) -> Value {
    let mut v = json!({"error": e.kind(), "message": e.to_string()});
    if let Error::Config { key, .. } = e {
        v["key"] = json!(key);
    }
    v
}

fn load_config(common: &Common, overrides: &[(String, String)], seed_key: &str) -> Result<Config, Error> {
    let mut overrides = overrides.to_vec();
    if let Some(seed) = common.seed {
        overrides.push((seed_key.to_string(), seed.to_string()));
    }
    Config::load(common.config.as_deref(), &overrides)
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<Value, Error> {
    match command {
        Command::Generate { common, force } => {
            let config = load_config(&common, overrides, "generate.seed")?;
            let out = generate_synthetic_dataset(&config.generate, &config.sam, &common.out, force)?;
            Ok(json!({
                "command": "generate",
                "out": out,
                "real": config.generate.real,
                "fake": config.generate.fake,
                "seed": config.generate.seed,
            }))
        }
        Command::Blend {
            common,
            dataset,
            video,
            start,
        } => {
            let config = load_config(&common, overrides, "trainer.seed")?;
            let root = dataset.unwrap_or_else(|| config.dataset.root.clone());
            let videos = load_videos(&root, config.encoder.image_size, false)?;
            let v = pick(&videos, video.as_deref(), Some(Label::Real), &root)?;
            blend(&config, v, start, common.seed.unwrap_or(config.trainer.seed), &common.out)
        }
        Command::Train { common, resume } => {
            let config = load_config(&common, overrides, "trainer.seed")?;
            let last = train(config, &common.out, resume.as_deref())?;
            Ok(json!({
                "command": "train",
                "out": common.out,
                "checkpoint": last,
                "metrics": common.out.join("metrics.jsonl"),
            }))
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let config = load_config(&common, overrides, "trainer.seed")?;
            let (model, _) = load_model(&checkpoint)?;
            let root = dataset.unwrap_or_else(|| config.dataset.test_root.clone());
            let videos = load_videos(&root, model.config().image_size, config.dataset.preload)?;
            let report = evaluate(&model, &videos, &config.eval, config.losses.theta())?;
            let value = serde_json::to_value(&report).expect("report serializes");
            write_json(&common.out, "metrics.json", &value)?;
            Ok(value)
        }
        Command::Viz {
            common,
            checkpoint,
            dataset,
            video,
            start,
        } => {
            let config = load_config(&common, overrides, "trainer.seed")?;
            let (model, _) = load_model(&checkpoint)?;
            let root = dataset.unwrap_or_else(|| config.dataset.test_root.clone());
            let videos = load_videos(&root, model.config().image_size, false)?;
            let v = pick(&videos, video.as_deref(), None, &root)?;
            let clip = v.clip(start, model.config().num_frames)?;
            let out = emit_patch_heatmap(&model, &clip, &common.out, &config.eval)?;
            Ok(json!({
                "command": "viz",
                "video_id": v.record.video_id,
                "frames": out.frames,
                "probs": out.json,
            }))
        }
    }
}

fn pick<'a>(videos: &'a [Video], id: Option<&str>, label: Option<Label>, root: &Path) -> Result<&'a Video, Error> {
    let found = match id {
        Some(id) => videos.iter().find(|v| v.record.video_id == id),
        None => videos.iter().find(|v| label.is_none_or(|l| v.label() == l)),
    };
    found.ok_or_else(|| {
        Error::EmptyDataset(match id {
            Some(id) => format!("no video {id:?} under {}", root.display()),
            None => format!("no suitable video under {}", root.display()),
        })
    })
}

fn blend(config: &Config, video: &Video, start: usize, seed: u64, out: &Path) -> Result<Value, Error> {
    let t = config.encoder.num_frames;
    let clip = video.clip(start, t)?;
    let landmarks = video.clip_landmarks(start, t).ok_or_else(|| Error::MalformedLandmarks {
        path: video.record.landmark_path.clone().unwrap_or_default(),
        reason: format!("video {} has no landmarks", video.record.video_id),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blended = temporal_artifact_generate(&clip, &landmarks, &config.sam, &mut rng)?;
    let labels = patch_labels(&blended.mask, config.encoder.num_patches(), config.losses.theta())?;

    for dir in ["frames", "masks"] {
        let d = out.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| io_error(&d, e))?;
    }
    let size = video.crop_size() as u32;
    for (i, frame) in blended.clip.frames.iter().enumerate() {
        let path = out.join("frames").join(format!("{i:03}.png"));
        frame.to_rgb8().save(&path).map_err(|source| Error::Image { path, source })?;
        let raw = blended
            .mask
            .frame(i)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = out.join("masks").join(format!("{i:03}.png"));
        image::GrayImage::from_raw(size, size, raw)
            .expect("mask matches frame size")
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    let grid = config.encoder.grid_side();
    let summary = json!({
        "command": "blend",
        "video_id": video.record.video_id,
        "start": start,
        "frames": t,
        "seed": seed,
        "theta": labels.theta,
        "grid": [grid, grid],
        "patch_labels": labels.labels.chunks(labels.patches).collect::<Vec<_>>(),
        "enhancement": blended.enhancement,
        "mask_params": blended.mask_params,
        "frame_strength": blended.frame_strength,
    });
    write_json(out, "blend.json", &summary)?;
    Ok(summary)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
