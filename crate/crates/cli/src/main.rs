use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dlc_core::behavior::ActMode;
use dlc_core::env::{Autopilot, EnvConfig};
use dlc_core::eval::{self, Contestant};
use dlc_core::io::write_atomic;
use dlc_core::trainer::{self, checkpoint_dtype, derive_seed, run_race, Agents, Driver, EpisodeRecord, RunLayout, VariantConfig};
use dlc_core::{DType, Error, Scalar};

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_VAR: &str = "DLC_RUN_ROOT";

#[derive(Parser)]
#[command(name = "dlc", version, about = "Train and evaluate two-agent latent world models", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of online episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Defaults to `$DLC_RUN_ROOT/<variant>-seed<N>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Round robin between checkpoints and scripted drivers.
    Tournament {
        #[arg(long, num_args = 0..)]
        checkpoints: Vec<PathBuf>,
        /// Scripted entrants as `name=speed`.
        #[arg(long, num_args = 0..)]
        scripted: Vec<String>,
        #[arg(long, default_value_t = 100)]
        races: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Environment config (TOML `[env]` table or bare table); defaults
        /// to the first checkpoint's.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solo races with a checkpoint's policy.
    EvalSolo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        races: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also score a uniform random policy on the same tracks.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Context filtering followed by open-loop imagination.
    PredictOpen {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode container.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long = "t")]
        t0: usize,
        #[arg(long, default_value_t = eval::CONTEXT)]
        context: usize,
        #[arg(long, default_value_t = eval::HORIZON)]
        horizon: usize,
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
    },
    /// Reconstructions after filtering an episode prefix.
    PredictClosed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long = "t")]
        t: usize,
        #[arg(long, default_value = "reconstruction")]
        out: PathBuf,
    },
    /// Race a checkpoint against itself and write the episode container.
    ExportEpisode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write every frame as PNG into this directory.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    config: VariantConfig,
    root_seed: u64,
    code_version: String,
    started: String,
    finished: Option<String>,
    config_file: PathBuf,
    checkpoint: PathBuf,
    metrics: PathBuf,
    episode_log: PathBuf,
    episodes_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::Config(msg)) = e.downcast_ref::<Error>() {
                eprintln!("invalid config:");
                for item in msg.split("; ") {
                    eprintln!("  - {item}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, seed, episodes, run_dir, resume } => train(&config, seed, episodes, run_dir, resume),
        Command::Tournament { checkpoints, scripted, races, seed, env, out } => {
            let dtype = match checkpoints.first() {
                Some(c) => checkpoint_dtype(&checkpoint_path(c))?,
                None => DType::F32,
            };
            match dtype {
                DType::F32 => tournament::<f32>(&checkpoints, &scripted, races, seed, env.as_deref(), out.as_deref()),
                DType::F64 => tournament::<f64>(&checkpoints, &scripted, races, seed, env.as_deref(), out.as_deref()),
            }
        }
        Command::EvalSolo { checkpoint, races, seed, random_baseline } => match checkpoint_dtype(&checkpoint_path(&checkpoint))? {
            DType::F32 => eval_solo::<f32>(&checkpoint, races, seed, random_baseline),
            DType::F64 => eval_solo::<f64>(&checkpoint, races, seed, random_baseline),
        },
        Command::PredictOpen { checkpoint, episode, t0, context, horizon, out } => {
            match checkpoint_dtype(&checkpoint_path(&checkpoint))? {
                DType::F32 => predict::<f32>(&checkpoint, &episode, t0, context, horizon, false, &out),
                DType::F64 => predict::<f64>(&checkpoint, &episode, t0, context, horizon, false, &out),
            }
        }
        Command::PredictClosed { checkpoint, episode, t, out } => match checkpoint_dtype(&checkpoint_path(&checkpoint))? {
            DType::F32 => predict::<f32>(&checkpoint, &episode, 0, t + 1, 0, true, &out),
            DType::F64 => predict::<f64>(&checkpoint, &episode, 0, t + 1, 0, true, &out),
        },
        Command::ExportEpisode { checkpoint, seed, out, frames } => match checkpoint_dtype(&checkpoint_path(&checkpoint))? {
            DType::F32 => export_episode::<f32>(&checkpoint, seed, &out, frames.as_deref()),
            DType::F64 => export_episode::<f64>(&checkpoint, seed, &out, frames.as_deref()),
        },
    }
}

/// Accepts either a checkpoint file or a run directory.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        RunLayout::new(p).checkpoint()
    } else {
        p.to_path_buf()
    }
}

fn contestant_name(p: &Path) -> String {
    let p = if p.is_dir() { p } else { p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(p) };
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn train(config: &Path, seed: Option<u64>, episodes: Option<usize>, run_dir: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = VariantConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = episodes {
        cfg.episodes = k;
    }
    cfg.validate()?;
    let dir = run_dir.unwrap_or_else(|| {
        let root = std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{}-seed{}", cfg.variant.label(), cfg.seed))
    });
    fs::create_dir_all(&dir)?;
    let layout = RunLayout::new(&dir);
    let mut manifest = RunManifest {
        config: cfg.clone(),
        root_seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started: now(),
        finished: None,
        config_file: layout.config(),
        checkpoint: layout.checkpoint(),
        metrics: layout.metrics(),
        episode_log: layout.episode_log(),
        episodes_dir: layout.episodes_dir(),
    };
    let manifest_path = dir.join("manifest.json");
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    let summary = match cfg.dtype {
        DType::F32 => trainer::run_with::<f32>(&cfg, &dir, resume, |k| progress(k, cfg.episodes)),
        DType::F64 => trainer::run_with::<f64>(&cfg, &dir, resume, |k| progress(k, cfg.episodes)),
    }?;
    manifest.finished = Some(now());
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    println!(
        "trained {} episodes ({} env steps, {} iterations) in {}",
        summary.progress.episodes,
        summary.progress.env_steps,
        summary.progress.iterations,
        dir.display()
    );
    Ok(())
}

fn progress(k: usize, total: usize) -> dlc_core::Result<()> {
    eprintln!("episode {k}/{total}");
    Ok(())
}

fn load_env(path: &Path) -> Result<EnvConfig> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Wrapped {
        env: EnvConfig,
    }
    let text = fs::read_to_string(path)?;
    if let Ok(w) = toml::from_str::<Wrapped>(&text) {
        return Ok(w.env);
    }
    toml::from_str::<EnvConfig>(&text).map_err(|e| Error::Config(e.to_string()).into())
}

fn tournament<T: Scalar>(
    checkpoints: &[PathBuf],
    scripted: &[String],
    races: usize,
    seed: u64,
    env: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut contestants: Vec<Contestant<T>> = Vec::new();
    let mut env_cfg = match env {
        Some(p) => Some(load_env(p)?),
        None => None,
    };
    for c in checkpoints {
        let (cfg, agents) = Agents::<T>::load(&checkpoint_path(c)).with_context(|| format!("loading {}", c.display()))?;
        env_cfg.get_or_insert(EnvConfig { num_cars: 2, ..cfg.env.clone() });
        contestants.push(Contestant::learned(contestant_name(c), agents));
    }
    for s in scripted {
        let (name, speed) = s.split_once('=').with_context(|| format!("scripted entrant {s:?} is not name=speed"))?;
        let speed: f64 = speed.parse().with_context(|| format!("bad speed in {s:?}"))?;
        contestants.push(Contestant::scripted(name, Autopilot::with_speed(speed)));
    }
    let env_cfg = env_cfg.unwrap_or_else(EnvConfig::desk);
    let results = eval::round_robin(&contestants, &env_cfg, races, seed)?;
    let table = eval::format_table(&results);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut lines = Vec::new();
        for r in &results {
            lines.extend(serde_json::to_vec(r)?);
            lines.push(b'\n');
        }
        write_atomic(&dir.join("tournament.jsonl"), &lines)?;
        write_atomic(&dir.join("tournament.txt"), table.as_bytes())?;
    }
    Ok(())
}

fn eval_solo<T: Scalar>(checkpoint: &Path, races: usize, seed: u64, random_baseline: bool) -> Result<()> {
    let (cfg, agents) = Agents::<T>::load(&checkpoint_path(checkpoint))?;
    let c = Contestant::learned(contestant_name(checkpoint), agents);
    let r = eval::single_agent_eval(&c, &cfg.env, races, seed)?;
    println!("{}", serde_json::to_string(&r)?);
    if random_baseline {
        let b = eval::single_agent_eval(&Contestant::<T>::Random { name: "random".into() }, &cfg.env, races, seed)?;
        println!("{}", serde_json::to_string(&b)?);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict<T: Scalar>(checkpoint: &Path, episode: &Path, t0: usize, context: usize, horizon: usize, closed: bool, out: &Path) -> Result<()> {
    let (_, agents) = Agents::<T>::load(&checkpoint_path(checkpoint))?;
    let ep = EpisodeRecord::load(episode).with_context(|| format!("reading {}", episode.display()))?;
    let r = if closed {
        eval::closed_loop_prediction(&agents, &ep, t0, t0 + context - 1)?
    } else {
        eval::open_loop_prediction(&agents, &ep, t0, context, horizon)?
    };
    fs::create_dir_all(out)?;
    let reads: Vec<_> = r.reads.iter().filter(|a| a.stream == trainer::Stream::Observation).collect();
    let summary = serde_json::json!({
        "start": r.start,
        "context": r.context,
        "horizon": r.horizon,
        "frames_per_view": r.frames(),
        "views": if r.opponent.is_some() { 2 } else { 1 },
        "ego_mse": r.ego_mse,
        "opponent_mse": r.opponent_mse,
        "last_observation_read": reads.iter().map(|a| a.step).max(),
    });
    write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    eval::save_grid(&r, &out.join("grid.png"))?;
    println!("{} frames per view written to {}", r.frames(), out.display());
    Ok(())
}

fn export_episode<T: Scalar>(checkpoint: &Path, seed: u64, out: &Path, frames: Option<&Path>) -> Result<()> {
    let (cfg, agents) = Agents::<T>::load(&checkpoint_path(checkpoint))?;
    let n = cfg.env.num_cars;
    let mut drivers = (0..n)
        .map(|i| agents.driver(i, ActMode::Mode, 0.0, derive_seed(seed, i as u64)))
        .collect::<dlc_core::Result<Vec<_>>>()?;
    let mut refs: Vec<&mut dyn Driver> = drivers.iter_mut().map(|d| d as &mut dyn Driver).collect();
    let ep = run_race(&cfg.env, seed, None, &mut refs, 0, "export", None)?;
    ep.save(out)?;
    if let Some(dir) = frames {
        fs::create_dir_all(dir)?;
        for (a, stream) in ep.observations.iter().enumerate() {
            for (t, o) in stream.iter().enumerate() {
                let s = o.size as u32;
                let img = image::RgbImage::from_raw(s, s, o.pixels.clone()).context("frame buffer size")?;
                img.save(dir.join(format!("agent{a}_{t:04}.png")))?;
            }
        }
    }
    if ep.is_empty() {
        bail!("exported race has no steps");
    }
    println!("{} steps, scores {:?}, written to {}", ep.len(), ep.scores(), out.display());
    Ok(())
}
