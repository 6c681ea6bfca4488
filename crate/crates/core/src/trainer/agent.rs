//! Acting in the environment: access-logged per-agent views of a step,
//! drivers that turn views into actions, and the race loop that records
//! episodes.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::replay::{EpisodeMeta, EpisodeRecord};
use super::Variant;
use crate::behavior::{ActMode, Behavior};
use crate::env::{self, Autopilot, EnvAction, EnvConfig, EnvState, Observation, StartAssignment};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::worldmodel::{obs_tensor, JointLatent, Noise, WorldModel, ACTION_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Observation,
    Action,
    Reward,
    /// Simulator state, used by scripted drivers only.
    GroundTruth,
}

/// One read of `owner`'s data by agent `reader` at control step `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Access {
    pub reader: usize,
    pub owner: usize,
    pub stream: Stream,
    pub step: usize,
}

/// Everything available at one control step. Agents only see it through
/// [`AgentView`], which logs every read.
pub struct StepContext<'a> {
    step: usize,
    state: &'a EnvState,
    observations: &'a [Observation],
    prev_actions: &'a [[f64; 3]],
    prev_rewards: &'a [f64],
    log: RefCell<Vec<Access>>,
}

impl<'a> StepContext<'a> {
    pub fn new(
        step: usize,
        state: &'a EnvState,
        observations: &'a [Observation],
        prev_actions: &'a [[f64; 3]],
        prev_rewards: &'a [f64],
    ) -> Self {
        Self { step, state, observations, prev_actions, prev_rewards, log: RefCell::new(Vec::new()) }
    }

    pub fn view(&self, agent: usize) -> AgentView<'_> {
        AgentView { ctx: self, agent }
    }

    pub fn take_log(&self) -> Vec<Access> {
        std::mem::take(&mut self.log.borrow_mut())
    }
}

pub struct AgentView<'c> {
    ctx: &'c StepContext<'c>,
    agent: usize,
}

impl AgentView<'_> {
    fn note(&self, owner: usize, stream: Stream) {
        self.ctx.log.borrow_mut().push(Access { reader: self.agent, owner, stream, step: self.ctx.step });
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn step(&self) -> usize {
        self.ctx.step
    }

    pub fn num_agents(&self) -> usize {
        self.ctx.observations.len()
    }

    pub fn observation(&self, owner: usize) -> &Observation {
        self.note(owner, Stream::Observation);
        &self.ctx.observations[owner]
    }

    /// Action `owner` executed on the previous step; zeros at the start.
    pub fn prev_action(&self, owner: usize) -> [f64; 3] {
        self.note(owner, Stream::Action);
        self.ctx.prev_actions[owner]
    }

    pub fn prev_reward(&self, owner: usize) -> f64 {
        self.note(owner, Stream::Reward);
        self.ctx.prev_rewards[owner]
    }

    pub fn ground_truth(&self) -> &EnvState {
        self.note(self.agent, Stream::GroundTruth);
        self.ctx.state
    }
}

/// Produces one policy-space action per control step.
pub trait Driver {
    fn reset(&mut self) {}
    fn act(&mut self, view: &AgentView) -> Result<[f64; 3]>;
}

/// Pure-pursuit controller reading the simulator state.
#[derive(Clone, Debug)]
pub struct ScriptedDriver(pub Autopilot);

impl Driver for ScriptedDriver {
    fn act(&mut self, view: &AgentView) -> Result<[f64; 3]> {
        let a = self.0.act(view.ground_truth(), view.agent());
        Ok([a.steer, a.gas, a.brake])
    }
}

/// Uniform actions in `[-1, 1]^3`.
#[derive(Clone, Debug)]
pub struct RandomDriver(pub ChaCha8Rng);

impl RandomDriver {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Driver for RandomDriver {
    fn act(&mut self, _view: &AgentView) -> Result<[f64; 3]> {
        Ok([0; ACTION_DIM].map(|_| self.0.gen_range(-1.0..=1.0)))
    }
}

/// Learned agent filtering its own latent state. The joint latent is held
/// ego-first: slot 0 is this agent, slot 1 the opponent.
pub struct PolicyDriver<'m, T: Scalar> {
    variant: Variant,
    model: &'m WorldModel<T>,
    behavior: &'m Behavior<T>,
    mode: ActMode,
    explore_noise: f64,
    rng: ChaCha8Rng,
    state: JointLatent<T>,
    predicted_opponent_action: [f64; 3],
    blank: Option<Tensor<T>>,
}

impl<'m, T: Scalar> PolicyDriver<'m, T> {
    pub fn new(
        variant: Variant,
        model: &'m WorldModel<T>,
        behavior: &'m Behavior<T>,
        mode: ActMode,
        explore_noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let want = variant.agents_per_model();
        if model.n_agents() != want || model.config.observer != (variant == Variant::JointObserver) {
            return Err(Error::Config(format!("model does not match variant {}", variant.label())));
        }
        Ok(Self {
            variant,
            model,
            behavior,
            mode,
            explore_noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: model.zero_state(1),
            predicted_opponent_action: [0.0; 3],
            blank: None,
        })
    }

    pub fn state(&self) -> &JointLatent<T> {
        &self.state
    }

    fn encode_ego(&self, obs: &Observation) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let e = self.model.encode(&obs_tensor(&[obs]))?;
        Ok((e.ego, e.opponent))
    }

    fn blank_embedding(&mut self) -> Result<Tensor<T>> {
        if self.blank.is_none() {
            let s = self.model.arch().image_size;
            self.blank = Some(self.encode_ego(&Observation::blank(s))?.0);
        }
        Ok(self.blank.clone().unwrap())
    }
}

fn row<T: Scalar>(parts: &[&[T]]) -> Tensor<T> {
    let data: Vec<T> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(vec![1, data.len()], data)
}

fn to_t<T: Scalar>(a: [f64; 3]) -> [T; 3] {
    a.map(T::c)
}

impl<T: Scalar> Driver for PolicyDriver<'_, T> {
    fn reset(&mut self) {
        self.state = self.model.zero_state(1);
        self.predicted_opponent_action = [0.0; 3];
    }

    fn act(&mut self, view: &AgentView) -> Result<[f64; 3]> {
        let me = view.agent();
        let own_prev = to_t::<T>(view.prev_action(me));
        let (ego, predicted) = self.encode_ego(view.observation(me))?;
        let (embed, actions) = match self.variant {
            Variant::Individual => (ego, row(&[&own_prev])),
            Variant::Joint => {
                let (opp_embed, opp_prev) = if view.num_agents() > 1 {
                    let opp = 1 - me;
                    let prev = to_t::<T>(view.prev_action(opp));
                    (self.encode_ego(view.observation(opp))?.0, prev)
                } else {
                    (self.blank_embedding()?, [T::zero(); 3])
                };
                (row(&[&ego.data, &opp_embed.data]), row(&[&own_prev, &opp_prev]))
            }
            Variant::JointObserver => {
                let z = predicted.ok_or_else(|| Error::Config("observer head missing".into()))?;
                let opp_prev = to_t::<T>(self.predicted_opponent_action);
                (row(&[&ego.data, &z.data]), row(&[&own_prev, &opp_prev]))
            }
        };
        let mut noise = match self.mode {
            ActMode::Sample => Noise::Sample(&mut self.rng),
            ActMode::Mode => Noise::Mean,
        };
        let (post, _) = self.model.observe_step(&self.state, &actions, &embed, &mut noise)?;
        if !post.is_finite() {
            return Err(Error::NonFiniteLatent { step: view.step() });
        }
        self.state = post;
        let arch = self.model.arch();
        let own = self.behavior.act(&self.state.feature(0, arch), self.mode, self.explore_noise, &mut self.rng)[0];
        if self.variant == Variant::JointObserver {
            let f = self.state.feature(1, arch);
            self.predicted_opponent_action = self.behavior.act(&f, ActMode::Mode, 0.0, &mut self.rng)[0];
        }
        Ok(own)
    }
}

/// Runs one race to completion and records it. With `log`, every read made
/// by the drivers is appended there.
#[allow(clippy::too_many_arguments)]
pub fn run_race(
    config: &EnvConfig,
    seed: u64,
    start: Option<&StartAssignment>,
    drivers: &mut [&mut dyn Driver],
    index: usize,
    source: &str,
    mut log: Option<&mut Vec<Access>>,
) -> Result<EpisodeRecord> {
    let (mut state, mut obs) = match start {
        Some(s) => env::reset_with(config, seed, s)?,
        None => env::reset(config, seed)?,
    };
    let n = state.num_cars();
    if drivers.len() != n {
        return Err(Error::Length(format!("{} drivers for {n} cars", drivers.len())));
    }
    let meta = EpisodeMeta { index, seed, num_agents: n, image_size: config.image_size, source: source.into() };
    let mut record = EpisodeRecord::new(meta);
    for d in drivers.iter_mut() {
        d.reset();
    }
    let mut prev_actions = vec![[0.0; 3]; n];
    let mut prev_rewards = vec![0.0; n];
    while !state.done() {
        let ctx = StepContext::new(state.step_count, &state, &obs, &prev_actions, &prev_rewards);
        let mut actions = Vec::with_capacity(n);
        for (i, d) in drivers.iter_mut().enumerate() {
            let a = d.act(&ctx.view(i))?;
            if let Some(&value) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAction { agent: i, value });
            }
            actions.push(a.map(|x| x.clamp(-1.0, 1.0)));
        }
        if let Some(l) = log.as_deref_mut() {
            l.extend(ctx.take_log());
        }
        drop(ctx);
        let env_actions: Vec<EnvAction> = actions.iter().map(|&a| EnvAction::from_policy(a)).collect();
        let out = state.step_mut(&env_actions)?;
        for i in 0..n {
            record.observations[i].push(std::mem::replace(&mut obs[i], Observation::blank(0)));
            record.actions[i].push(actions[i]);
            record.rewards[i].push(out.rewards[i]);
        }
        obs = out.observations;
        prev_actions = actions;
        prev_rewards = out.rewards;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_logs_reads() {
        let cfg = EnvConfig::desk();
        let (state, obs) = env::reset(&cfg, 1).unwrap();
        let acts = [[0.0; 3]; 2];
        let rew = [0.0; 2];
        let ctx = StepContext::new(0, &state, &obs, &acts, &rew);
        let v = ctx.view(0);
        v.observation(0);
        v.prev_action(1);
        let log = ctx.take_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1], Access { reader: 0, owner: 1, stream: Stream::Action, step: 0 });
    }

    #[test]
    fn scripted_race_is_reproducible() {
        let cfg = EnvConfig { episode_length: 40, ..EnvConfig::desk() };
        let race = || {
            let mut a = ScriptedDriver(Autopilot::default());
            let mut b = RandomDriver::new(5);
            run_race(&cfg, 9, None, &mut [&mut a, &mut b], 0, "test", None).unwrap()
        };
        let (x, y) = (race(), race());
        assert_eq!(x, y);
        assert_eq!(x.len(), 40);
        x.validate().unwrap();
    }
}
