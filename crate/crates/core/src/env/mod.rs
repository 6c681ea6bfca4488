//! Two-car top-down racing simulator.
//!
//! One control step applies the same action for `action_repeat` physics
//! substeps of `physics_dt` seconds each. Tiles touched by the car body
//! center or any wheel during those substeps are credited once per
//! (tile, agent) pair, in visitation order.

mod autopilot;
mod physics;
mod render;
mod reward;
mod track;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autopilot::Autopilot;
pub use physics::{resolve_collision, rotate, CarState, Contact, Friction, WheelState, CAR_LENGTH, CAR_WIDTH, WHEEL_OFFSETS};
pub use render::{car_in_view, render_ego_view, view_to_world};
pub use reward::{compute_rewards, visit_reward, Visit, FIRST_VISIT_TOTAL, SECOND_VISIT_TOTAL, TIME_PENALTY};
pub use track::{generate_track, wrap_angle, Tile, Track, Vec2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Simulator configuration. Lengths in meters, times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Observation side length in pixels.
    pub image_size: usize,
    /// 2 for races, 1 for solo driving.
    pub num_cars: usize,
    /// Number of reward tiles N.
    pub num_tiles: usize,
    pub track_radius: f64,
    pub track_half_width: f64,
    /// Scales the random curvature of generated tracks.
    pub track_roughness: f64,
    /// Episode length T in control steps.
    pub episode_length: usize,
    pub physics_dt: f64,
    /// Physics substeps per control step.
    pub action_repeat: usize,
    pub road_friction: f64,
    /// Multiplies tire friction off the road; must lie in (0, 1).
    pub grass_friction_factor: f64,
    /// Width of the ego view in meters.
    pub view_width_m: f64,
    /// Vertical position of the ego car in the view, as a fraction from the top.
    pub view_ego_row: f64,
    pub penalize_backward: bool,
    /// Subtracted per control step while driving against the track direction.
    pub backward_penalty: f64,
    pub max_track_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            num_cars: 2,
            num_tiles: 300,
            track_radius: 150.0,
            track_half_width: 20.0 / 3.0,
            track_roughness: 1.0,
            episode_length: 1000,
            physics_dt: 0.02,
            action_repeat: 2,
            road_friction: 1.0,
            grass_friction_factor: 0.4,
            view_width_m: 40.0,
            view_ego_row: 0.7,
            penalize_backward: false,
            backward_penalty: 0.1,
            max_track_attempts: 20,
        }
    }
}

impl EnvConfig {
    /// Small track and 64×64 observations for single-machine experiments.
    pub fn desk() -> Self {
        Self { image_size: 64, num_tiles: 60, track_radius: 60.0, episode_length: 300, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        if !(1..=2).contains(&self.num_cars) {
            return fail("num_cars must be 1 or 2");
        }
        if self.num_tiles < 3 {
            return fail("num_tiles must be at least 3");
        }
        if self.episode_length == 0 || self.action_repeat == 0 || self.max_track_attempts == 0 {
            return fail("episode_length, action_repeat and max_track_attempts must be positive");
        }
        let positive = [self.track_radius, self.track_half_width, self.physics_dt, self.road_friction, self.view_width_m];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return fail("lengths, physics_dt and road_friction must be positive");
        }
        if !(self.grass_friction_factor > 0.0 && self.grass_friction_factor < 1.0) {
            return fail("grass_friction_factor must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.view_ego_row) || !(self.track_roughness >= 0.0) || !(self.backward_penalty >= 0.0) {
            return fail("view_ego_row must lie in [0, 1]; roughness and penalty must be non-negative");
        }
        Ok(())
    }

    pub fn friction(&self) -> Friction {
        Friction { road: self.road_friction, grass_factor: self.grass_friction_factor }
    }

    /// Values per observation (H·W·3).
    pub fn obs_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    pub steer: f64,
    pub gas: f64,
    pub brake: f64,
}

impl EnvAction {
    pub fn new(steer: f64, gas: f64, brake: f64) -> Self {
        Self { steer, gas, brake }
    }

    /// Maps a policy output in `[-1, 1]^3` to the control box.
    pub fn from_policy(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2]).clamped()
    }

    pub fn clamped(&self) -> Self {
        Self { steer: self.steer.clamp(-1.0, 1.0), gas: self.gas.clamp(0.0, 1.0), brake: self.brake.clamp(0.0, 1.0) }
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.gas.is_finite() && self.brake.is_finite()
    }

    fn first_non_finite(&self) -> Option<f64> {
        [self.steer, self.gas, self.brake].into_iter().find(|v| !v.is_finite())
    }
}

/// Ego-view RGB image, row-major H×W×3 bytes; intensity is `byte / 255`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Observation {
    pub fn blank(size: usize) -> Self {
        Self { size, pixels: vec![0; size * size * 3] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Intensities in `[0, 1]`.
    pub fn to_unit<T: Scalar>(&self) -> Vec<T> {
        self.pixels.iter().map(|&p| T::c(p as f64 / 255.0)).collect()
    }

    pub fn from_unit<T: Scalar>(size: usize, values: &[T]) -> Self {
        let pixels = values.iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { size, pixels }
    }
}

/// Per-tile visitation order for each agent: 0 = not visited, else 1 or 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLedger {
    pub orders: Vec<Vec<u8>>,
}

impl TileLedger {
    pub fn new(num_tiles: usize, num_agents: usize) -> Self {
        Self { orders: vec![vec![0; num_agents]; num_tiles] }
    }

    pub fn is_empty(&self) -> bool {
        self.orders.iter().all(|o| o.iter().all(|&v| v == 0))
    }

    pub fn visited(&self, tile: usize, agent: usize) -> bool {
        self.orders[tile][agent] != 0
    }

    pub fn visited_count(&self, agent: usize) -> usize {
        self.orders.iter().filter(|o| o[agent] != 0).count()
    }

    pub fn all_visited(&self) -> bool {
        self.orders.iter().all(|o| o.iter().all(|&v| v != 0))
    }

    /// Credits the tiles each agent touched this control step. A tile with no
    /// prior visitor makes every agent touching it now a first visitor.
    pub fn credit(&mut self, touched: &[Vec<usize>]) -> Vec<Vec<Visit>> {
        let mut delta = vec![Vec::new(); touched.len()];
        let mut tiles: Vec<usize> = touched.iter().flatten().copied().collect();
        tiles.sort_unstable();
        tiles.dedup();
        for tile in tiles {
            let prior = self.orders[tile].iter().filter(|&&v| v != 0).count();
            let order = if prior == 0 { 1 } else { 2 };
            for (agent, t) in touched.iter().enumerate() {
                if t.contains(&tile) && self.orders[tile][agent] == 0 {
                    self.orders[tile][agent] = order;
                    delta[agent].push(Visit { tile, order });
                }
            }
        }
        delta
    }
}

/// Grid slot and color per agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartAssignment {
    pub slots: Vec<usize>,
    pub colors: Vec<[u8; 3]>,
}

pub const CAR_PALETTE: [[u8; 3]; 6] =
    [[204, 0, 0], [0, 0, 204], [230, 180, 0], [160, 0, 200], [0, 170, 200], [240, 110, 0]];

impl StartAssignment {
    pub fn random(num_cars: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut slots: Vec<usize> = (0..num_cars).collect();
        slots.shuffle(rng);
        let colors = CAR_PALETTE.choose_multiple(rng, num_cars).copied().collect();
        Self { slots, colors }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub track: Arc<Track>,
    pub cars: Vec<CarState>,
    pub tile_ledger: TileLedger,
    pub step_count: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    /// Tile part of each agent's reward.
    pub tile_rewards: Vec<f64>,
    pub visits: Vec<Vec<Visit>>,
    pub contacts: usize,
    pub done: bool,
}

/// Resets with a seeded grid order and colors.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Vec<Observation>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ca75);
    let start = StartAssignment::random(config.num_cars, &mut rng);
    reset_inner(config, seed, &start, rng)
}

/// Resets with an explicit grid order and colors.
pub fn reset_with(config: &EnvConfig, seed: u64, start: &StartAssignment) -> Result<(EnvState, Vec<Observation>)> {
    config.validate()?;
    if start.slots.len() != config.num_cars || start.colors.len() != config.num_cars {
        return Err(Error::Config("start assignment does not match num_cars".into()));
    }
    let mut sorted = start.slots.clone();
    sorted.sort_unstable();
    if sorted != (0..config.num_cars).collect::<Vec<_>>() {
        return Err(Error::Config("start slots must be a permutation".into()));
    }
    let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ca75);
    reset_inner(config, seed, start, rng)
}

/// Grid slot pose: side by side across tile 0.
pub fn grid_pose(track: &Track, slot: usize, num_cars: usize) -> (Vec2, f64) {
    let mid = track.tile_mid(0);
    let heading = track.heading_at(0);
    let lateral = if num_cars == 1 { 0.0 } else if slot == 0 { 0.5 } else { -0.5 } * track.half_width;
    let left = [-heading.sin(), heading.cos()];
    ([mid[0] + lateral * left[0], mid[1] + lateral * left[1]], heading)
}

fn reset_inner(config: &EnvConfig, seed: u64, start: &StartAssignment, rng: ChaCha8Rng) -> Result<(EnvState, Vec<Observation>)> {
    let track = Arc::new(generate_track(seed, config)?);
    let cars = (0..config.num_cars)
        .map(|i| {
            let (pos, heading) = grid_pose(&track, start.slots[i], config.num_cars);
            CarState::new(pos, heading, start.colors[i])
        })
        .collect();
    let state = EnvState {
        config: config.clone(),
        tile_ledger: TileLedger::new(track.num_tiles(), config.num_cars),
        track,
        cars,
        step_count: 0,
        rng,
    };
    let obs = state.observations();
    Ok((state, obs))
}

impl EnvState {
    pub fn num_cars(&self) -> usize {
        self.cars.len()
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.num_cars()).map(|i| render_ego_view(self, i)).collect()
    }

    pub fn done(&self) -> bool {
        self.step_count >= self.config.episode_length || self.tile_ledger.all_visited()
    }

    fn touched_tiles(&self, agent: usize, into: &mut Vec<usize>) {
        let car = &self.cars[agent];
        let points = std::iter::once(car.position).chain((0..4).map(|w| car.wheel_position(w)));
        for p in points {
            for t in self.track.tiles_at(p) {
                if !into.contains(&t) {
                    into.push(t);
                }
            }
        }
    }

    /// Advances one control step in place.
    pub fn step_mut(&mut self, actions: &[EnvAction]) -> Result<StepOutcome> {
        if actions.len() != self.num_cars() {
            return Err(Error::Length(format!("{} actions for {} cars", actions.len(), self.num_cars())));
        }
        for (agent, a) in actions.iter().enumerate() {
            if let Some(value) = a.first_non_finite() {
                return Err(Error::NonFiniteAction { agent, value });
            }
        }
        if self.done() {
            return Err(Error::EpisodeFinished(self.step_count));
        }
        let friction = self.config.friction();
        let dt = self.config.physics_dt;
        let mut touched = vec![Vec::new(); self.num_cars()];
        let mut contacts = 0;
        for _ in 0..self.config.action_repeat {
            for (car, a) in self.cars.iter_mut().zip(actions) {
                car.advance(a, friction, &self.track, dt);
            }
            if self.cars.len() == 2 {
                let (a, b) = self.cars.split_at_mut(1);
                contacts += resolve_collision(&mut a[0], &mut b[0]).len();
            }
            for (agent, t) in touched.iter_mut().enumerate() {
                self.touched_tiles(agent, t);
            }
        }
        for (agent, car) in self.cars.iter().enumerate() {
            if !car.is_finite() {
                return Err(Error::NonFinite { what: format!("car {agent} state") });
            }
        }
        let visits = self.tile_ledger.credit(&touched);
        let mut rewards = compute_rewards(&visits, self.track.num_tiles())?;
        let tile_rewards: Vec<f64> = rewards.iter().map(|r| r + TIME_PENALTY).collect();
        if self.config.penalize_backward {
            for (r, car) in rewards.iter_mut().zip(&self.cars) {
                let k = self.track.nearest_tile(car.position);
                let dir = self.track.tiles[k].direction;
                if car.velocity[0] * dir[0] + car.velocity[1] * dir[1] < 0.0 {
                    *r -= self.config.backward_penalty;
                }
            }
        }
        self.step_count += 1;
        Ok(StepOutcome { observations: self.observations(), rewards, tile_rewards, visits, contacts, done: self.done() })
    }
}

/// Pure step: returns the successor state.
pub fn step(state: &EnvState, actions: &[EnvAction]) -> Result<(EnvState, StepOutcome)> {
    let mut next = state.clone();
    let out = next.step_mut(actions)?;
    Ok((next, out))
}

/// Stateful wrapper around [`EnvState`].
#[derive(Clone, Debug)]
pub struct RaceEnv {
    config: EnvConfig,
    state: Option<EnvState>,
}

impl RaceEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let (s, obs) = reset(&self.config, seed)?;
        self.state = Some(s);
        Ok(obs)
    }

    pub fn reset_with(&mut self, seed: u64, start: &StartAssignment) -> Result<Vec<Observation>> {
        let (s, obs) = reset_with(&self.config, seed, start)?;
        self.state = Some(s);
        Ok(obs)
    }

    /// Panics if called before `reset`.
    pub fn state(&self) -> &EnvState {
        self.state.as_ref().expect("RaceEnv::reset must be called first")
    }

    pub fn step(&mut self, actions: &[EnvAction]) -> Result<StepOutcome> {
        match self.state.as_mut() {
            Some(s) => s.step_mut(actions),
            None => Err(Error::Config("step called before reset".into())),
        }
    }
}
