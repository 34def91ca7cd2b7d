use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[encoder]
preset = "toy"
image_size = 32
patch_size = 8
embed_dim = 32
depth = 1
num_heads = 2
adapter_bottleneck = 8
num_frames = 4

[generate]
real = 4
fake = 2
frames = 48
image_size = 32

[trainer]
epochs = 1
iters_per_epoch = 2
batch_videos = 2
clips_per_video = 2
"#;

fn deepshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepshield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let v = stdout_json(&deepshield(&["generate", "--config", s(&cfg), "--seed", "3", "--out", s(&data)]));
    assert_eq!(v["real"], 4);
    assert_eq!(v["seed"], 3);
    assert!(data.read_dir().unwrap().count() > 0);

    let blend_out = dir.path().join("blend");
    let v = stdout_json(&deepshield(&[
        "blend", "--config", s(&cfg), "--seed", "1", "--out", s(&blend_out), "--dataset", s(&data),
    ]));
    assert_eq!(v["frames"], 4);
    assert_eq!(v["grid"], serde_json::json!([4, 4]));
    assert!(blend_out.join("frames/003.png").exists());
    assert!(blend_out.join("masks/000.png").exists());
    assert!(blend_out.join("blend.json").exists());

    let v = stdout_json(&deepshield(&[
        "train", "--config", s(&cfg), "--seed", "0", "--out", s(&run), "--dataset.root", s(&data),
    ]));
    let ckpt = v["checkpoint"].as_str().expect("checkpoint path").to_string();
    assert!(Path::new(&ckpt).exists());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(run.join("config.resolved.toml").exists());

    let eval_out = dir.path().join("eval");
    let v = stdout_json(&deepshield(&[
        "eval", "--config", s(&cfg), "--seed", "0", "--out", s(&eval_out), "--checkpoint", &ckpt, "--dataset", s(&data),
    ]));
    let auc = v["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(v["n_videos"], 6);
    assert!(eval_out.join("metrics.json").exists());

    let viz_out = dir.path().join("viz");
    let v = stdout_json(&deepshield(&[
        "viz", "--config", s(&cfg), "--seed", "0", "--out", s(&viz_out), "--checkpoint", &ckpt, "--dataset", s(&data),
    ]));
    assert_eq!(v["frames"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[losses]\nthetta = 3\n").unwrap();
    let out = deepshield(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let e = stderr_json(&out);
    assert_eq!(e["error"], "config");
    assert!(e["key"].as_str().unwrap().contains("thetta"), "{e}");
}

#[test]
fn bad_override_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepshield(&["generate", "--out", s(&dir.path().join("d")), "--generate.real=many"]);
    assert!(!out.status.success());
    let e = stderr_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "generate.real");
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = deepshield(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn existing_output_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let args = ["generate", "--config", s(&cfg), "--out", s(&data)];
    stdout_json(&deepshield(&args));
    let out = deepshield(&args);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "output_exists");
    let mut forced = args.to_vec();
    forced.push("--force");
    stdout_json(&deepshield(&forced));
}

#[test]
fn missing_dataset_fails_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepshield(&[
        "train",
        "--out",
        s(&dir.path().join("run")),
        "--dataset.root",
        s(&dir.path().join("nowhere")),
    ]);
    assert!(!out.status.success());
    let e = stderr_json(&out);
    assert!(e["error"].is_string() && e["message"].is_string(), "{e}");
}
