//! Episode records and the replay memory sampled for model training.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::io::{Blob, Container};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::worldmodel::{SequenceBatch, ACTION_DIM};

pub const EPISODE_KIND: &str = "episode";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub index: usize,
    /// Environment reset seed.
    pub seed: u64,
    pub num_agents: usize,
    pub image_size: usize,
    /// Free-form origin tag, e.g. `"random"` or `"policy"`.
    pub source: String,
}

/// One race. Step `t` holds the observation each agent acted on, the
/// executed policy-space action and the reward that followed.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    /// `[agent][t]`
    pub observations: Vec<Vec<Observation>>,
    pub actions: Vec<Vec<[f64; 3]>>,
    pub rewards: Vec<Vec<f64>>,
}

impl EpisodeRecord {
    pub fn new(meta: EpisodeMeta) -> Self {
        let n = meta.num_agents;
        Self { meta, observations: vec![Vec::new(); n], actions: vec![Vec::new(); n], rewards: vec![Vec::new(); n] }
    }

    pub fn len(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_agents(&self) -> usize {
        self.meta.num_agents
    }

    /// Undiscounted return of `agent`.
    pub fn score(&self, agent: usize) -> f64 {
        self.rewards[agent].iter().sum()
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.num_agents()).map(|a| self.score(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_agents();
        let t = self.len();
        if self.observations.len() != n || self.actions.len() != n || self.rewards.len() != n {
            return Err(Error::Length(format!("episode streams do not cover {n} agents")));
        }
        for a in 0..n {
            if self.observations[a].len() != t || self.actions[a].len() != t || self.rewards[a].len() != t {
                return Err(Error::Length(format!("agent {a} streams differ in length")));
            }
            if self.observations[a].iter().any(|o| o.size != self.meta.image_size) {
                return Err(Error::Shape(format!("agent {a} observation size differs from {}", self.meta.image_size)));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let (n, t, s) = (self.num_agents(), self.len(), self.meta.image_size);
        let mut c = Container::new(EPISODE_KIND, serde_json::to_value(&self.meta)?);
        for a in 0..n {
            let pixels: Vec<u8> = self.observations[a].iter().flat_map(|o| o.pixels.iter().copied()).collect();
            c.push(Blob::u8(format!("agent{a}/observations"), vec![t, s, s, 3], pixels));
            let acts: Vec<f64> = self.actions[a].iter().flatten().copied().collect();
            c.push(Blob::f64(format!("agent{a}/actions"), vec![t, ACTION_DIM], acts));
            c.push(Blob::f64(format!("agent{a}/rewards"), vec![t], self.rewards[a].clone()));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: EpisodeMeta = serde_json::from_value(c.meta.clone())?;
        let s = meta.image_size;
        let mut ep = Self::new(meta);
        for a in 0..ep.num_agents() {
            let (shape, px) = c.u8s(&format!("agent{a}/observations"))?;
            if shape.len() != 4 || shape[1..] != [s, s, 3] {
                return Err(Error::Shape(format!("stored observations {shape:?}")));
            }
            ep.observations[a] = px.chunks_exact(s * s * 3).map(|p| Observation { size: s, pixels: p.to_vec() }).collect();
            let (_, acts) = c.f64s(&format!("agent{a}/actions"))?;
            ep.actions[a] = acts.chunks_exact(ACTION_DIM).map(|x| [x[0], x[1], x[2]]).collect();
            ep.rewards[a] = c.f64s(&format!("agent{a}/rewards"))?.1.to_vec();
        }
        ep.validate()?;
        Ok(ep)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind(EPISODE_KIND)?)
    }
}

/// Start of a length-`L` training window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub episode: usize,
    pub offset: usize,
}

/// Append-only episode store; `capacity` bounds it by evicting the oldest.
#[derive(Clone, Debug, Default)]
pub struct ReplayMemory {
    episodes: VecDeque<EpisodeRecord>,
    capacity: Option<usize>,
}

impl ReplayMemory {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { episodes: VecDeque::new(), capacity: capacity.filter(|&c| c > 0) }
    }

    pub fn push(&mut self, ep: EpisodeRecord) {
        self.episodes.push_back(ep);
        if let Some(cap) = self.capacity {
            while self.episodes.len() > cap {
                self.episodes.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn get(&self, i: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(i)
    }

    /// Number of valid windows of length `length`.
    pub fn num_windows(&self, length: usize) -> usize {
        self.episodes.iter().map(|e| (e.len() + 1).saturating_sub(length)).sum()
    }

    /// Draws `batch` windows uniformly over all valid `(episode, offset)` pairs.
    pub fn sample_windows(&self, batch: usize, length: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Window>> {
        if length == 0 || batch == 0 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        let total = self.num_windows(length);
        if total == 0 {
            return Err(Error::InsufficientData(format!(
                "{} episodes hold no window of length {length}",
                self.episodes.len()
            )));
        }
        Ok((0..batch)
            .map(|_| {
                let mut k = rng.gen_range(0..total);
                for (i, e) in self.episodes.iter().enumerate() {
                    let n = (e.len() + 1).saturating_sub(length);
                    if k < n {
                        return Window { episode: i, offset: k };
                    }
                    k -= n;
                }
                unreachable!("window index within total")
            })
            .collect())
    }

    /// Time-major batch of `agents`' streams; `agents` also fixes the agent
    /// order inside the joint action and reward columns.
    pub fn batch<T: Scalar>(&self, windows: &[Window], length: usize, agents: &[usize]) -> Result<SequenceBatch<T>> {
        let b = windows.len();
        let n = agents.len();
        let mut eps = Vec::with_capacity(b);
        for w in windows {
            let e = self.episodes.get(w.episode).ok_or_else(|| Error::InsufficientData(format!("no episode {}", w.episode)))?;
            if w.offset + length > e.len() {
                return Err(Error::EpisodeBoundary);
            }
            if let Some(&a) = agents.iter().find(|&&a| a >= e.num_agents()) {
                return Err(Error::Shape(format!("episode has no agent {a}")));
            }
            eps.push(e);
        }
        let size = eps.first().map_or(0, |e| e.meta.image_size);
        let obs_len = size * size * 3;
        let rows = length * b;
        let mut obs: Vec<Vec<T>> = vec![Vec::with_capacity(rows * obs_len); n];
        let mut prev_actions = Vec::with_capacity(rows * n * ACTION_DIM);
        let mut prev_rewards = Vec::with_capacity(rows * n);
        let mut mask = Vec::with_capacity(rows);
        for t in 0..length {
            for (e, w) in eps.iter().zip(windows) {
                let step = w.offset + t;
                for (k, &a) in agents.iter().enumerate() {
                    obs[k].extend(e.observations[a][step].to_unit::<T>());
                }
                for &a in agents {
                    let act = if step == 0 { [0.0; ACTION_DIM] } else { e.actions[a][step - 1] };
                    prev_actions.extend(act.iter().map(|&x| T::c(x)));
                }
                for &a in agents {
                    prev_rewards.push(T::c(if step == 0 { 0.0 } else { e.rewards[a][step - 1] }));
                }
                mask.push(if step == 0 { T::zero() } else { T::one() });
            }
        }
        Ok(SequenceBatch {
            length,
            batch: b,
            obs: obs.into_iter().map(|d| Tensor::new(vec![rows, size, size, 3], d)).collect(),
            prev_actions: Tensor::new(vec![rows, n * ACTION_DIM], prev_actions),
            prev_rewards: Tensor::new(vec![rows, n], prev_rewards),
            reward_mask: Tensor::new(vec![rows, 1], mask),
        })
    }
}
