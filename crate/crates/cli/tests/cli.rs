use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
variant = "joint_observer"
arch = "tiny"
dtype = "f32"
seed = 3
episodes = 1
seed_episodes = 2
train_iterations = 2
train_every = 40
batch_size = 2
seq_len = 8
horizon = 3

[env]
image_size = 16
num_tiles = 20
track_radius = 30.0
episode_length = 40
"#;

fn dlc(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlc")).args(args).env("DLC_RUN_ROOT", root).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(dlc(&[], tmp.path()).status.code(), Some(2));
    assert_eq!(dlc(&["fly"], tmp.path()).status.code(), Some(2));
    assert_eq!(dlc(&["train"], tmp.path()).status.code(), Some(2));
}

#[test]
fn invalid_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = TINY.replace("batch_size = 2", "batch_size = 0").replace("seq_len = 8", "seq_len = 80");
    let cfg = write_config(tmp.path(), &bad);
    let out = dlc(&["train", "--config", s(&cfg)], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_size must be positive"), "{err}");
    assert!(err.contains("seq_len 80 exceeds"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("colour = \"red\"\n{TINY}"));
    let out = dlc(&["train", "--config", s(&cfg)], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn zero_episodes_writes_checkpoint_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    ok(&dlc(&["train", "--config", s(&cfg), "--episodes", "0", "--seed", "5"], tmp.path()));
    let run = tmp.path().join("joint_observer-seed5");
    assert!(run.join("checkpoint.bin").exists());
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap().len(), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["root_seed"], 5);
    assert!(manifest["finished"].is_string());
    for key in ["config_file", "checkpoint", "metrics", "episode_log", "episodes_dir"] {
        assert!(Path::new(manifest[key].as_str().unwrap()).exists(), "{key}");
    }
    // the effective config is stored with the overrides applied
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 5") && saved.contains("episodes = 0"), "{saved}");
}

#[test]
fn training_twice_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&dlc(&["train", "--config", s(&cfg), "--run-dir", s(&a)], tmp.path()));
    ok(&dlc(&["train", "--config", s(&cfg), "--run-dir", s(&b)], tmp.path()));
    for f in ["metrics.jsonl", "episodes.jsonl", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!fs::read(a.join("metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn scripted_tournament_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let env = write_config(tmp.path(), "num_tiles = 20\ntrack_radius = 30.0\nimage_size = 16\nepisode_length = 30\n");
    let out_dir = tmp.path().join("t");
    let out = dlc(
        &["tournament", "--scripted", "fast=16", "slow=8", "--races", "2", "--env", s(&env), "--out", s(&out_dir)],
        tmp.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fast"));
    let lines = fs::read_to_string(out_dir.join("tournament.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let row: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(row["races"], 2);
}

#[test]
fn export_predict_and_evaluate_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = tmp.path().join("run");
    ok(&dlc(&["train", "--config", s(&cfg), "--episodes", "0", "--run-dir", s(&run)], tmp.path()));

    let ep = tmp.path().join("ep.bin");
    let frames = tmp.path().join("frames");
    ok(&dlc(&["export-episode", "--checkpoint", s(&run), "--seed", "4", "--out", s(&ep), "--frames", s(&frames)], tmp.path()));
    assert!(ep.exists());
    assert!(frames.join("agent1_0000.png").exists());

    let pred = tmp.path().join("pred");
    ok(&dlc(&["predict-open", "--checkpoint", s(&run), "--episode", s(&ep), "--t", "2", "--out", s(&pred)], tmp.path()));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(pred.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames_per_view"], 30);
    assert_eq!(summary["views"], 2);
    assert_eq!(summary["last_observation_read"], 6);
    assert!(pred.join("grid.png").exists());

    let rec = tmp.path().join("rec");
    ok(&dlc(&["predict-closed", "--checkpoint", s(&run), "--episode", s(&ep), "--t", "9", "--out", s(&rec)], tmp.path()));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(rec.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames_per_view"], 10);

    let out = dlc(&["eval-solo", "--checkpoint", s(&run), "--races", "2", "--random-baseline"], tmp.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 2);

    let out = dlc(&["predict-open", "--checkpoint", s(&run), "--episode", s(&ep), "--t", "39", "--out", s(&pred)], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "full.toml"] {
        let cfg = dlc_core::trainer::VariantConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
}
