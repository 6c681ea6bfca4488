//! Online collection and offline model/policy updates for the three model
//! variants, with checkpointing and crash resume.

mod agent;
mod replay;

pub use agent::{run_race, Access, AgentView, Driver, PolicyDriver, RandomDriver, ScriptedDriver, StepContext, Stream};
pub use replay::{EpisodeMeta, EpisodeRecord, ReplayMemory, Window, EPISODE_KIND};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::behavior::{ActMode, Behavior, BehaviorConfig, BehaviorMetrics};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::io::{config_hash, Blob, Container, RngState};
use crate::nn::{Adam, AdamState, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::worldmodel::{Architecture, JointLatent, ModelConfig, ModelLossBreakdown, Noise, WorldModel};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One single-agent model per car.
    Individual,
    /// Joint transition; both agents' observations are shared while acting.
    Joint,
    /// Joint transition with the opponent-embedding head; acting is decentralized.
    JointObserver,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Individual, Variant::Joint, Variant::JointObserver];

    pub fn agents_per_model(self) -> usize {
        match self {
            Variant::Individual => 1,
            _ => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Individual => "individual",
            Variant::Joint => "joint",
            Variant::JointObserver => "joint_observer",
        }
    }
}

/// Every training hyperparameter. Serialized as a flat TOML document with
/// the environment in an `[env]` table; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Architecture preset: `full`, `desk` or `tiny`.
    pub arch: String,
    pub dtype: DType,
    pub seed: u64,
    /// Online episodes K.
    pub episodes: usize,
    pub seed_episodes: usize,
    /// Train iterations S per `train_every` environment steps.
    pub train_iterations: usize,
    pub train_every: usize,
    pub batch_size: usize,
    /// Sequence length L.
    pub seq_len: usize,
    /// Imagination horizon H.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub model_lr: f64,
    pub value_lr: f64,
    pub actor_lr: f64,
    pub grad_clip: f64,
    pub explore_noise: f64,
    /// Episodes kept in replay; 0 keeps everything.
    pub replay_capacity: usize,
    pub env: EnvConfig,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::JointObserver,
            arch: "full".into(),
            dtype: DType::F32,
            seed: 0,
            episodes: 500,
            seed_episodes: 5,
            train_iterations: 200,
            train_every: 1000,
            batch_size: 50,
            seq_len: 50,
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            beta: 1.0,
            model_lr: 6e-4,
            value_lr: 6e-4,
            actor_lr: 8e-5,
            grad_clip: 100.0,
            explore_noise: 0.3,
            replay_capacity: 0,
            env: EnvConfig::default(),
        }
    }
}

impl VariantConfig {
    /// Reduced network and track for a single CPU.
    pub fn desk() -> Self {
        Self {
            arch: "desk".into(),
            episodes: 100,
            train_iterations: 50,
            train_every: 300,
            batch_size: 16,
            seq_len: 32,
            env: EnvConfig::desk(),
            ..Self::default()
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::by_name(&self.arch)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            arch: self.architecture()?,
            n_agents: self.variant.agents_per_model(),
            observer: self.variant == Variant::JointObserver,
            beta: self.beta,
        })
    }

    pub fn behavior_config(&self) -> BehaviorConfig {
        BehaviorConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            horizon: self.horizon,
            actor_lr: self.actor_lr,
            value_lr: self.value_lr,
            grad_clip: self.grad_clip,
            ..BehaviorConfig::default()
        }
    }

    /// Number of world models trained.
    pub fn num_models(&self) -> usize {
        match self.variant {
            Variant::Individual => self.env.num_cars,
            _ => 1,
        }
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.env.validate() {
            p.push(e.to_string());
        }
        match self.model_config() {
            Ok(m) => {
                if let Err(e) = m.validate() {
                    p.push(e.to_string());
                }
                if m.arch.image_size != self.env.image_size {
                    p.push(format!("arch {} expects {}px images, env renders {}px", self.arch, m.arch.image_size, self.env.image_size));
                }
            }
            Err(e) => p.push(e.to_string()),
        }
        if self.variant != Variant::Individual && self.env.num_cars != 2 {
            p.push(format!("variant {} needs two cars", self.variant.label()));
        }
        for (name, v) in [("batch_size", self.batch_size), ("seq_len", self.seq_len), ("horizon", self.horizon), ("train_every", self.train_every)] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if self.episodes > 0 && self.seed_episodes == 0 {
            p.push("seed_episodes must be at least 1 before training can start".into());
        }
        if self.seq_len > self.env.episode_length {
            p.push(format!("seq_len {} exceeds episode_length {}", self.seq_len, self.env.episode_length));
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                p.push(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [("model_lr", self.model_lr), ("value_lr", self.value_lr), ("actor_lr", self.actor_lr), ("beta", self.beta), ("explore_noise", self.explore_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                p.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.grad_clip > 0.0) {
            p.push("grad_clip must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Seed for a named sub-stream of the root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(root);
    r.set_stream(stream);
    r.gen()
}

fn stream(root: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(root);
    r.set_stream(id);
    r
}

/// Independent generators derived from the root seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    /// Environment reset seeds.
    pub env: ChaCha8Rng,
    /// Replay window sampling.
    pub sampling: ChaCha8Rng,
    /// Acting noise and driver seeds.
    pub policy: ChaCha8Rng,
    /// Latent sampling during updates.
    pub model: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        Self { env: stream(root, 1), sampling: stream(root, 2), policy: stream(root, 3), model: stream(root, 4) }
    }

    fn capture(&self) -> [RngState; 4] {
        [&self.env, &self.sampling, &self.policy, &self.model].map(RngState::capture)
    }

    fn restore(s: &[RngState; 4]) -> Result<Self> {
        Ok(Self { env: s[0].restore()?, sampling: s[1].restore()?, policy: s[2].restore()?, model: s[3].restore()? })
    }
}

/// World models plus the shared policy and critic of one variant.
#[derive(Clone, Debug)]
pub struct Agents<T: Scalar> {
    pub variant: Variant,
    pub env: EnvConfig,
    pub models: Vec<WorldModel<T>>,
    pub behavior: Behavior<T>,
}

impl<T: Scalar> Agents<T> {
    pub fn new(config: &VariantConfig) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config()?;
        let models = (0..config.num_models())
            .map(|i| WorldModel::new(mc.clone(), derive_seed(config.seed, 10 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let behavior = Behavior::new(&mc.arch, config.behavior_config(), derive_seed(config.seed, 20));
        Ok(Self { variant: config.variant, env: config.env.clone(), models, behavior })
    }

    /// Model used by the car in slot `agent`.
    pub fn model_for(&self, agent: usize) -> &WorldModel<T> {
        &self.models[agent % self.models.len()]
    }

    /// Agent streams a model is trained on, in model slot order.
    pub fn trained_agents(&self, model: usize) -> Vec<usize> {
        match self.variant {
            Variant::Individual => vec![model],
            _ => vec![0, 1],
        }
    }

    pub fn driver(&self, agent: usize, mode: ActMode, explore_noise: f64, seed: u64) -> Result<PolicyDriver<'_, T>> {
        PolicyDriver::new(self.variant, self.model_for(agent), &self.behavior, mode, explore_noise, seed)
    }

    fn stores(&self) -> Vec<(String, &ParamStore<T>)> {
        let mut v: Vec<(String, &ParamStore<T>)> =
            self.models.iter().enumerate().map(|(i, m)| (format!("model{i}"), &m.store)).collect();
        v.push(("actor".into(), &self.behavior.actor_store));
        v.push(("value".into(), &self.behavior.value_store));
        v
    }

    fn stores_mut(&mut self) -> Vec<(String, &mut ParamStore<T>)> {
        let mut v: Vec<(String, &mut ParamStore<T>)> =
            self.models.iter_mut().enumerate().map(|(i, m)| (format!("model{i}"), &mut m.store)).collect();
        v.push(("actor".into(), &mut self.behavior.actor_store));
        v.push(("value".into(), &mut self.behavior.value_store));
        v
    }

    /// Loads parameters from a training checkpoint.
    pub fn load(path: &Path) -> Result<(VariantConfig, Self)> {
        let c = Container::read(path)?.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {:?} parameters, requested {:?}", meta.dtype, T::DTYPE)));
        }
        let mut agents = Self::new(&meta.config)?;
        for (prefix, store) in agents.stores_mut() {
            load_store(&c, &prefix, store)?;
        }
        Ok((meta.config, agents))
    }
}

/// Element type recorded in a checkpoint.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let c = Container::read(path)?.expect_kind(CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta)?;
    Ok(meta.dtype)
}

fn push_tensors<T: Scalar>(c: &mut Container, prefix: &str, names: &[&str], tensors: &[Tensor<T>]) {
    for (name, t) in names.iter().zip(tensors) {
        c.push(Blob::f64(format!("{prefix}/{name}"), t.shape.clone(), t.to_f64_vec()));
    }
}

fn read_tensor<T: Scalar>(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let (s, d) = c.f64s(name)?;
    if s != shape {
        return Err(Error::Checkpoint(format!("{name}: shape {s:?}, expected {shape:?}")));
    }
    Ok(Tensor::from_f64(s, d))
}

fn load_store<T: Scalar>(c: &Container, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let loaded: Vec<Tensor<T>> = store
        .named()
        .map(|(name, t)| read_tensor(c, &format!("{prefix}/{name}"), &t.shape))
        .collect::<Result<_>>()?;
    let mut it = loaded.iter();
    store.load_named(|_| it.next()).map_err(Error::Checkpoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: VariantConfig,
    config_hash: String,
    dtype: DType,
    progress: Progress,
    rng: [RngState; 4],
    adam_steps: Vec<u64>,
}

/// Position in the training schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Online episodes completed.
    pub episodes: usize,
    /// Episodes collected in total, seed episodes included.
    pub collected: usize,
    pub env_steps: usize,
    pub iterations: usize,
    /// Owed iterations scaled by `train_every`.
    pub pending: usize,
    /// Byte lengths of the metric logs when the checkpoint was written.
    pub metrics_bytes: u64,
    pub episodes_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub models: Vec<ModelLossBreakdown>,
    pub behavior: BehaviorMetrics,
}

impl IterationMetrics {
    /// Sum of the models' losses.
    pub fn model_loss(&self) -> f64 {
        self.models.iter().map(|m| m.total).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub episode: usize,
    pub iteration: usize,
    pub env_steps: usize,
    pub model_loss: f64,
    pub j_o: f64,
    pub j_r: f64,
    pub j_d: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub env_steps: usize,
    pub length: usize,
    pub returns: Vec<f64>,
    /// Agent 0's return minus agent 1's; 0 for solo races.
    pub win_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRow {
    Train(TrainRow),
    Episode(EpisodeRow),
}

pub struct Trainer<T: Scalar> {
    pub config: VariantConfig,
    pub agents: Agents<T>,
    pub model_opts: Vec<AdamState<T>>,
    pub actor_opt: AdamState<T>,
    pub value_opt: AdamState<T>,
    pub memory: ReplayMemory,
    pub rngs: RngStreams,
    pub progress: Progress,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: VariantConfig) -> Result<Self> {
        let agents = Agents::new(&config)?;
        Ok(Self {
            model_opts: agents.models.iter().map(|m| AdamState::new(&m.store)).collect(),
            actor_opt: AdamState::new(&agents.behavior.actor_store),
            value_opt: AdamState::new(&agents.behavior.value_store),
            memory: ReplayMemory::new(Some(config.replay_capacity)),
            rngs: RngStreams::new(config.seed),
            progress: Progress::default(),
            agents,
            config,
        })
    }

    fn next_meta_index(&mut self) -> usize {
        self.progress.collected += 1;
        self.progress.collected - 1
    }

    /// Collects `n` races with uniform random actions into memory.
    pub fn seed_memory(&mut self, n: usize) -> Result<Vec<EpisodeRecord>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let seed = self.rngs.env.gen();
            let mut drivers: Vec<RandomDriver> = (0..self.config.env.num_cars).map(|_| RandomDriver::new(self.rngs.policy.gen())).collect();
            let mut refs: Vec<&mut dyn Driver> = drivers.iter_mut().map(|d| d as &mut dyn Driver).collect();
            let index = self.next_meta_index();
            let ep = run_race(&self.config.env, seed, None, &mut refs, index, "random", None)?;
            self.memory.push(ep.clone());
            out.push(ep);
        }
        Ok(out)
    }

    /// Races the current policy with exploration noise and stores the episode.
    /// With `log`, every read made by the drivers is recorded.
    pub fn collect_episode(&mut self, log: Option<&mut Vec<Access>>) -> Result<EpisodeRecord> {
        let seed = self.rngs.env.gen();
        let seeds: Vec<u64> = (0..self.config.env.num_cars).map(|_| self.rngs.policy.gen()).collect();
        let index = self.progress.collected;
        let ep = {
            let mut drivers = seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| self.agents.driver(i, ActMode::Sample, self.config.explore_noise, s))
                .collect::<Result<Vec<_>>>()?;
            let mut refs: Vec<&mut dyn Driver> = drivers.iter_mut().map(|d| d as &mut dyn Driver).collect();
            run_race(&self.config.env, seed, None, &mut refs, index, "policy", log)?
        };
        self.progress.collected += 1;
        self.memory.push(ep.clone());
        Ok(ep)
    }

    /// Samples a batch and runs one model and one behavior update.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let windows = self.memory.sample_windows(self.config.batch_size, self.config.seq_len, &mut self.rngs.sampling)?;
        let mut rng = self.rngs.model.clone();
        let out = self.train_on(&windows, &mut rng);
        self.rngs.model = rng;
        out
    }

    /// One iteration on fixed windows. Nothing is applied unless every loss
    /// and gradient is finite.
    pub fn train_on(&mut self, windows: &[Window], rng: &mut ChaCha8Rng) -> Result<IterationMetrics> {
        let len = self.config.seq_len;
        let mut breakdowns = Vec::new();
        let mut grads = Vec::new();
        let mut starts = Vec::new();
        for (i, model) in self.agents.models.iter().enumerate() {
            let batch = self.memory.batch::<T>(windows, len, &self.agents.trained_agents(i))?;
            let mut g = Graph::new();
            let lg = model.representation_loss(&mut g, &batch, &mut Noise::Sample(rng))?;
            breakdowns.push(lg.breakdown(&g));
            let back = g.backward(lg.loss);
            let gr = g.param_grads(&model.store, &back);
            if !gr.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite { what: format!("model {i} gradients") });
            }
            grads.push(gr);
            let p = lg.posterior();
            starts.push(JointLatent {
                deter: g.value(p.deter).clone(),
                stoch: g.value(p.stoch).clone(),
                mean: g.value(p.post_mean).clone(),
                std: g.value(p.post_std).clone(),
            });
        }
        let sources: Vec<(&WorldModel<T>, &JointLatent<T>)> = self.agents.models.iter().zip(&starts).collect();
        let behavior = self.agents.behavior.update_many(&sources, &mut self.actor_opt, &mut self.value_opt, rng)?;
        let adam = Adam::new(self.config.model_lr, self.config.grad_clip);
        for ((model, opt), gr) in self.agents.models.iter_mut().zip(&mut self.model_opts).zip(grads) {
            adam.step(&mut model.store, opt, gr).map_err(|_| Error::NonFinite { what: "model gradients".into() })?;
        }
        self.progress.iterations += 1;
        Ok(IterationMetrics { models: breakdowns, behavior })
    }

    /// Iterations owed after `steps` more environment steps.
    pub fn schedule(&mut self, steps: usize) -> usize {
        self.progress.pending += self.config.train_iterations * steps;
        let n = self.progress.pending / self.config.train_every;
        self.progress.pending %= self.config.train_every;
        n
    }

    pub fn checkpoint(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            dtype: T::DTYPE,
            progress: self.progress.clone(),
            rng: self.rngs.capture(),
            adam_steps: self.opt_states().iter().map(|(_, s)| s.step).collect(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(&meta)?);
        let stores = self.agents.stores();
        for ((prefix, store), (_, opt)) in stores.iter().zip(self.opt_states()) {
            let names: Vec<&str> = store.named().map(|(n, _)| n).collect();
            push_tensors(&mut c, prefix, &names, store.tensors());
            push_tensors(&mut c, &format!("adam/{prefix}/m"), &names, &opt.m);
            push_tensors(&mut c, &format!("adam/{prefix}/v"), &names, &opt.v);
        }
        Ok(c)
    }

    fn opt_states(&self) -> Vec<(String, &AdamState<T>)> {
        let mut v: Vec<(String, &AdamState<T>)> =
            self.model_opts.iter().enumerate().map(|(i, o)| (format!("model{i}"), o)).collect();
        v.push(("actor".into(), &self.actor_opt));
        v.push(("value".into(), &self.value_opt));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write_atomic(path)
    }

    /// Restores parameters, optimizer moments, RNG streams and progress.
    /// Replay memory is not part of the checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {:?} parameters", meta.dtype)));
        }
        if meta.config.hash()? != meta.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut t = Self::new(meta.config.clone())?;
        for (prefix, store) in t.agents.stores_mut() {
            load_store(&c, &prefix, store)?;
        }
        let prefixes: Vec<String> = t.agents.stores().into_iter().map(|(p, _)| p).collect();
        let mut opts: Vec<&mut AdamState<T>> = t.model_opts.iter_mut().collect();
        opts.push(&mut t.actor_opt);
        opts.push(&mut t.value_opt);
        if meta.adam_steps.len() != opts.len() {
            return Err(Error::Checkpoint("optimizer count mismatch".into()));
        }
        for ((prefix, opt), &step) in prefixes.iter().zip(opts).zip(&meta.adam_steps) {
            let names: Vec<String> = {
                let c2 = &c;
                c2.blobs
                    .iter()
                    .filter_map(|b| b.name.strip_prefix(&format!("{prefix}/")).map(str::to_string))
                    .collect()
            };
            if names.len() != opt.m.len() {
                return Err(Error::Checkpoint(format!("{prefix}: optimizer size mismatch")));
            }
            for (k, name) in names.iter().enumerate() {
                let shape = opt.m[k].shape.clone();
                opt.m[k] = read_tensor(&c, &format!("adam/{prefix}/m/{name}"), &shape)?;
                opt.v[k] = read_tensor(&c, &format!("adam/{prefix}/v/{name}"), &shape)?;
            }
            opt.step = step;
        }
        t.rngs = RngStreams::restore(&meta.rng)?;
        t.progress = meta.progress;
        Ok(t)
    }
}

/// Files of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn episode_log(&self) -> PathBuf {
        self.dir.join("episodes.jsonl")
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.dir.join("episodes")
    }

    pub fn episode(&self, index: usize) -> PathBuf {
        self.episodes_dir().join(format!("ep_{index:05}.bin"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub layout: RunLayout,
    pub progress: Progress,
    pub episode_rows: Vec<EpisodeRow>,
}

fn append_line<S: Serialize>(path: &Path, row: &S) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

fn truncate_to(path: &Path, len: u64) -> Result<()> {
    let f = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
    f.set_len(len)?;
    Ok(())
}

fn file_len(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

/// Trains for `config.episodes` online episodes, writing checkpoints and
/// logs under `dir`. With `resume`, continues from the last checkpoint.
pub fn run<T: Scalar>(config: &VariantConfig, dir: &Path, resume: bool) -> Result<RunSummary> {
    run_with::<T>(config, dir, resume, |_| Ok(()))
}

/// As [`run`], calling `after_episode` with the online episode count after
/// every checkpoint.
pub fn run_with<T: Scalar>(
    config: &VariantConfig,
    dir: &Path,
    resume: bool,
    mut after_episode: impl FnMut(usize) -> Result<()>,
) -> Result<RunSummary> {
    config.validate()?;
    let layout = RunLayout::new(dir);
    fs::create_dir_all(layout.episodes_dir())?;
    let mut trainer = if resume && layout.checkpoint().exists() {
        let mut t = Trainer::<T>::load(&layout.checkpoint())?;
        if t.config.hash()? != config.hash()? {
            let mut saved = t.config.clone();
            saved.episodes = config.episodes;
            if saved.hash()? != config.hash()? {
                return Err(Error::Config("resume config differs from the checkpointed one beyond `episodes`".into()));
            }
            t.config.episodes = config.episodes;
        }
        for i in 0..t.progress.collected {
            t.memory.push(EpisodeRecord::load(&layout.episode(i))?);
        }
        truncate_to(&layout.metrics(), t.progress.metrics_bytes)?;
        truncate_to(&layout.episode_log(), t.progress.episodes_bytes)?;
        t
    } else {
        for p in [layout.metrics(), layout.episode_log()] {
            fs::write(p, b"")?;
        }
        let mut t = Trainer::<T>::new(config.clone())?;
        for ep in t.seed_memory(config.seed_episodes)? {
            ep.save(&layout.episode(ep.meta.index))?;
        }
        t.save(&layout.checkpoint())?;
        t
    };
    crate::io::write_atomic(&layout.config(), trainer.config.to_toml_string()?.as_bytes())?;

    while trainer.progress.episodes < trainer.config.episodes {
        let ep = trainer.collect_episode(None)?;
        ep.save(&layout.episode(ep.meta.index))?;
        trainer.progress.env_steps += ep.len();
        let k = trainer.progress.episodes;
        for _ in 0..trainer.schedule(ep.len()) {
            let m = trainer.train_iteration()?;
            let row = TrainRow {
                episode: k,
                iteration: trainer.progress.iterations,
                env_steps: trainer.progress.env_steps,
                model_loss: m.model_loss(),
                j_o: m.models.iter().map(|b| b.j_o).sum(),
                j_r: m.models.iter().map(|b| b.j_r).sum(),
                j_d: m.models.iter().map(|b| b.j_d).sum(),
                actor_loss: m.behavior.actor_loss,
                value_loss: m.behavior.value_loss,
                mean_return: m.behavior.mean_return,
                mean_reward: m.behavior.mean_reward,
            };
            append_line(&layout.metrics(), &MetricsRow::Train(row))?;
        }
        let returns = ep.scores();
        let row = EpisodeRow {
            episode: k,
            seed: ep.meta.seed,
            env_steps: trainer.progress.env_steps,
            length: ep.len(),
            win_margin: if returns.len() == 2 { returns[0] - returns[1] } else { 0.0 },
            returns,
        };
        append_line(&layout.metrics(), &MetricsRow::Episode(row.clone()))?;
        append_line(&layout.episode_log(), &row)?;
        trainer.progress.episodes += 1;
        trainer.progress.metrics_bytes = file_len(&layout.metrics());
        trainer.progress.episodes_bytes = file_len(&layout.episode_log());
        trainer.save(&layout.checkpoint())?;
        after_episode(trainer.progress.episodes)?;
    }
    Ok(RunSummary { layout: layout.clone(), progress: trainer.progress.clone(), episode_rows: read_episode_rows(&layout.episode_log())? })
}

pub fn read_episode_rows(path: &Path) -> Result<Vec<EpisodeRow>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(variant: Variant) -> VariantConfig {
        VariantConfig {
            variant,
            arch: "tiny".into(),
            dtype: DType::F64,
            seed: 7,
            episodes: 1,
            seed_episodes: 1,
            train_iterations: 2,
            train_every: 30,
            batch_size: 2,
            seq_len: 4,
            horizon: 3,
            env: EnvConfig { image_size: 16, episode_length: 30, ..EnvConfig::desk() },
            ..VariantConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let c = VariantConfig::desk();
        let s = c.to_toml_string().unwrap();
        assert_eq!(VariantConfig::from_toml_str(&s).unwrap(), c);
        assert!(VariantConfig::from_toml_str("bogus = 1").is_err());
        assert!(VariantConfig::from_toml_str("[env]\nbogus = 1").is_err());
        let partial = VariantConfig::from_toml_str("variant = \"joint\"\nseq_len = 7").unwrap();
        assert_eq!(partial.variant, Variant::Joint);
        assert_eq!(partial.seq_len, 7);
        assert_eq!(partial.horizon, 15);
    }

    #[test]
    fn full_size_defaults() {
        let c = VariantConfig::default();
        assert_eq!((c.env.episode_length, c.seq_len, c.horizon, c.train_iterations, c.batch_size), (1000, 50, 15, 200, 50));
        assert_eq!((c.model_lr, c.value_lr, c.actor_lr, c.grad_clip), (6e-4, 6e-4, 8e-5, 100.0));
        c.validate().unwrap();
    }

    #[test]
    fn validation_lists_every_problem() {
        let c = VariantConfig { batch_size: 0, horizon: 0, arch: "desk".into(), ..VariantConfig::default() };
        let p = c.problems();
        assert!(p.len() >= 3, "{p:?}");
    }

    #[test]
    fn schedule_matches_every_thousand_steps() {
        let mut t = Trainer::<f64>::new(tiny_config(Variant::Individual)).unwrap();
        t.config.train_iterations = 200;
        t.config.train_every = 1000;
        assert_eq!(t.schedule(1000), 200);
        assert_eq!(t.schedule(300) + t.schedule(300) + t.schedule(400), 200);
    }

    #[test]
    fn zero_seed_episodes_refuses_training() {
        let mut t = Trainer::<f64>::new(VariantConfig { episodes: 0, seed_episodes: 0, ..tiny_config(Variant::Joint) }).unwrap();
        assert!(matches!(t.train_iteration(), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn iteration_updates_every_store() {
        for v in Variant::ALL {
            let mut t = Trainer::<f64>::new(tiny_config(v)).unwrap();
            t.seed_memory(1).unwrap();
            let before: Vec<Vec<Tensor<f64>>> = t.agents.stores().iter().map(|(_, s)| s.tensors().to_vec()).collect();
            let m = t.train_iteration().unwrap();
            assert_eq!(m.models.len(), t.config.num_models());
            let after: Vec<Vec<Tensor<f64>>> = t.agents.stores().iter().map(|(_, s)| s.tensors().to_vec()).collect();
            for (b, a) in before.iter().zip(&after) {
                assert_ne!(b, a, "{}", v.label());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut t = Trainer::<f64>::new(tiny_config(Variant::JointObserver)).unwrap();
        t.seed_memory(1).unwrap();
        t.train_iteration().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        t.save(&p).unwrap();
        let back = Trainer::<f64>::load(&p).unwrap();
        for ((_, a), (_, b)) in t.agents.stores().iter().zip(back.agents.stores()) {
            assert_eq!(a.tensors(), b.tensors());
        }
        assert_eq!(back.actor_opt, t.actor_opt);
        assert_eq!(back.model_opts, t.model_opts);
        assert_eq!(back.rngs, t.rngs);
        assert_eq!(back.progress, t.progress);
        assert!(Trainer::<f32>::load(&p).is_err());
    }
}
