use std::fs;

use dlc_core::env::EnvConfig;
use dlc_core::trainer::{self, read_episode_rows, Trainer, Variant, VariantConfig};
use dlc_core::Error;

fn tiny(variant: Variant, episodes: usize) -> VariantConfig {
    VariantConfig {
        variant,
        arch: "tiny".into(),
        seed: 21,
        episodes,
        seed_episodes: 2,
        train_iterations: 2,
        train_every: 40,
        batch_size: 2,
        seq_len: 8,
        horizon: 3,
        env: EnvConfig { image_size: 16, num_tiles: 20, track_radius: 30.0, episode_length: 40, ..EnvConfig::desk() },
        ..VariantConfig::desk()
    }
}

#[test]
fn zero_episodes_leaves_initial_checkpoint_and_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    let s = trainer::run::<f32>(&tiny(Variant::JointObserver, 0), dir.path(), false).unwrap();
    assert!(s.layout.checkpoint().exists());
    assert_eq!(fs::read(s.layout.metrics()).unwrap().len(), 0);
    assert_eq!(fs::read(s.layout.episode_log()).unwrap().len(), 0);
    assert_eq!(s.progress.iterations, 0);
}

#[test]
fn two_episodes_log_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let s = trainer::run::<f32>(&tiny(Variant::Individual, 2), dir.path(), false).unwrap();
    let rows = read_episode_rows(&s.layout.episode_log()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.episode).collect::<Vec<_>>(), [0, 1]);
    assert!(s.progress.iterations > 0);
}

#[test]
fn memory_grows_by_one_episode_per_collection() {
    let mut t = Trainer::<f32>::new(tiny(Variant::Joint, 3)).unwrap();
    t.seed_memory(5).unwrap();
    assert_eq!(t.memory.len(), 5);
    for k in 1..=3 {
        t.collect_episode(None).unwrap();
        assert_eq!(t.memory.len(), 5 + k);
    }
}

#[test]
fn resume_after_crash_matches_uninterrupted_run() {
    let cfg = tiny(Variant::JointObserver, 3);
    let straight = tempfile::tempdir().unwrap();
    trainer::run::<f32>(&cfg, straight.path(), false).unwrap();

    let crashed = tempfile::tempdir().unwrap();
    let r = trainer::run_with::<f32>(&cfg, crashed.path(), false, |k| if k == 2 { Err(Error::Config("simulated crash".into())) } else { Ok(()) });
    assert!(r.is_err());
    // a partial line written after the checkpoint must be discarded on resume
    let metrics = crashed.path().join("metrics.jsonl");
    let mut bytes = fs::read(&metrics).unwrap();
    bytes.extend_from_slice(b"{\"kind\":\"train\",\"trunc");
    fs::write(&metrics, bytes).unwrap();
    trainer::run::<f32>(&cfg, crashed.path(), true).unwrap();

    for f in ["metrics.jsonl", "episodes.jsonl", "checkpoint.bin"] {
        assert_eq!(fs::read(straight.path().join(f)).unwrap(), fs::read(crashed.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_extends_episode_budget_only() {
    let dir = tempfile::tempdir().unwrap();
    trainer::run::<f32>(&tiny(Variant::Individual, 1), dir.path(), false).unwrap();
    let more = trainer::run::<f32>(&tiny(Variant::Individual, 2), dir.path(), true).unwrap();
    assert_eq!(more.progress.episodes, 2);
    let changed = VariantConfig { batch_size: 3, ..tiny(Variant::Individual, 3) };
    assert!(matches!(trainer::run::<f32>(&changed, dir.path(), true), Err(Error::Config(_))));
}

#[test]
fn f64_training_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = VariantConfig { dtype: dlc_core::DType::F64, ..tiny(Variant::JointObserver, 1) };
    let s = trainer::run::<f64>(&cfg, dir.path(), false).unwrap();
    let (loaded, _) = trainer::Agents::<f64>::load(&s.layout.checkpoint()).unwrap();
    assert_eq!(loaded, cfg);
    assert!(trainer::Agents::<f32>::load(&s.layout.checkpoint()).is_err());
}
