//! Closed- and open-loop latent prediction from agent 1's viewpoint.

use std::cell::RefCell;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::behavior::ActMode;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{Access, Agents, EpisodeRecord, Stream, Variant};
use crate::worldmodel::{obs_tensor, JointLatent, Noise, WorldModel};

/// Context frames C.
pub const CONTEXT: usize = 5;
/// Open-loop frames P.
pub const HORIZON: usize = 25;

/// Read access to a recorded episode that logs every read as agent 0.
pub struct EpisodeReader<'e> {
    episode: &'e EpisodeRecord,
    log: RefCell<Vec<Access>>,
}

impl<'e> EpisodeReader<'e> {
    pub fn new(episode: &'e EpisodeRecord) -> Self {
        Self { episode, log: RefCell::new(Vec::new()) }
    }

    fn note(&self, owner: usize, stream: Stream, step: usize) {
        self.log.borrow_mut().push(Access { reader: 0, owner, stream, step });
    }

    pub fn observation(&self, owner: usize, step: usize) -> &'e Observation {
        self.note(owner, Stream::Observation, step);
        &self.episode.observations[owner][step]
    }

    /// Action executed by `owner` before `step`; zeros at the start.
    pub fn prev_action(&self, owner: usize, step: usize) -> [f64; 3] {
        self.note(owner, Stream::Action, step);
        if step == 0 {
            [0.0; 3]
        } else {
            self.episode.actions[owner][step - 1]
        }
    }

    pub fn into_log(self) -> Vec<Access> {
        self.log.into_inner()
    }
}

/// Decoded views over `context + horizon` steps starting at `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRollout {
    pub start: usize,
    pub context: usize,
    pub horizon: usize,
    pub ego: Vec<Observation>,
    /// Agent 1's reconstruction of agent 2's view; absent for single-agent models.
    pub opponent: Option<Vec<Observation>>,
    pub truth_ego: Vec<Observation>,
    pub truth_opponent: Option<Vec<Observation>>,
    /// Per-frame mean squared error on the unit scale.
    pub ego_mse: Vec<f64>,
    pub opponent_mse: Option<Vec<f64>>,
    /// Reads made while producing the predictions.
    pub reads: Vec<Access>,
}

impl PredictionRollout {
    pub fn frames(&self) -> usize {
        self.ego.len()
    }
}

fn row<T: Scalar>(parts: &[&[T]]) -> Tensor<T> {
    let data: Vec<T> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(vec![1, data.len()], data)
}

fn act_t<T: Scalar>(a: [f64; 3]) -> [T; 3] {
    a.map(T::c)
}

struct Decoded<T> {
    ego: Vec<Tensor<T>>,
    opponent: Vec<Tensor<T>>,
}

fn decode_views<T: Scalar>(model: &WorldModel<T>, s: &JointLatent<T>, out: &mut Decoded<T>) -> Result<()> {
    out.ego.push(model.decode(&s.feature(0, model.arch()))?);
    if model.n_agents() == 2 {
        out.opponent.push(model.decode(&s.feature(1, model.arch()))?);
    }
    Ok(())
}

fn to_obs<T: Scalar>(size: usize, t: &Tensor<T>) -> Observation {
    Observation::from_unit(size, &t.data)
}

fn mse<T: Scalar>(pred: &Tensor<T>, truth: &Observation) -> f64 {
    let u = truth.to_unit::<f64>();
    pred.data.iter().zip(&u).map(|(p, t)| (p.f64() - t).powi(2)).sum::<f64>() / u.len().max(1) as f64
}

/// Filters agent 1's observations for `context` steps from `start`, then
/// imagines `horizon` steps in which agent 1 replays its recorded actions
/// and agent 2 acts through the policy on its predicted latent state.
pub fn open_loop_prediction<T: Scalar>(
    agents: &Agents<T>,
    episode: &EpisodeRecord,
    start: usize,
    context: usize,
    horizon: usize,
) -> Result<PredictionRollout> {
    if context == 0 {
        return Err(Error::Config("prediction needs at least one context frame".into()));
    }
    let end = start + context + horizon;
    if episode.len() < end {
        return Err(Error::Length(format!("episode has {} steps, prediction needs {end}", episode.len())));
    }
    let model = agents.model_for(0);
    let arch = model.arch();
    let behavior = &agents.behavior;
    let variant = agents.variant;
    if variant == Variant::Joint && episode.num_agents() < 2 {
        return Err(Error::Unsupported("the joint variant filters both agents' observations".into()));
    }
    let reader = EpisodeReader::new(episode);
    let mut state = model.zero_state(1);
    let mut opp_pred = [0.0; 3];
    let mut dec = Decoded { ego: Vec::new(), opponent: Vec::new() };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let encode = |o: &Observation| model.encode(&obs_tensor(&[o]));

    for step in start..start + context {
        let own_prev = act_t::<T>(reader.prev_action(0, step));
        let e = encode(reader.observation(0, step))?;
        let (embed, actions) = match variant {
            Variant::Individual => (e.ego, row(&[&own_prev])),
            Variant::Joint => {
                let z2 = encode(reader.observation(1, step))?.ego;
                let a2 = act_t::<T>(reader.prev_action(1, step));
                (row(&[&e.ego.data, &z2.data]), row(&[&own_prev, &a2]))
            }
            Variant::JointObserver => {
                let z = e.opponent.ok_or_else(|| Error::Config("observer head missing".into()))?;
                (row(&[&e.ego.data, &z.data]), row(&[&own_prev, &act_t::<T>(opp_pred)]))
            }
        };
        state = model.observe_step(&state, &actions, &embed, &mut Noise::Mean)?.0;
        if model.n_agents() == 2 {
            opp_pred = behavior.act(&state.feature(1, arch), ActMode::Mode, 0.0, &mut rng)[0];
        }
        decode_views(model, &state, &mut dec)?;
    }
    for step in start + context..end {
        let own = act_t::<T>(reader.prev_action(0, step));
        let actions = if model.n_agents() == 2 {
            let a2 = behavior.act(&state.feature(1, arch), ActMode::Mode, 0.0, &mut rng)[0];
            row(&[&own, &act_t::<T>(a2)])
        } else {
            row(&[&own])
        };
        state = model.imagine_step(&state, &actions, &mut Noise::Mean)?;
        if !state.is_finite() {
            return Err(Error::NonFiniteLatent { step });
        }
        decode_views(model, &state, &mut dec)?;
    }
    let reads = reader.into_log();

    let size = arch.image_size;
    let truth_ego: Vec<Observation> = episode.observations[0][start..end].to_vec();
    let truth_opponent = (episode.num_agents() > 1).then(|| episode.observations[1][start..end].to_vec());
    let ego_mse = dec.ego.iter().zip(&truth_ego).map(|(p, t)| mse(p, t)).collect();
    let has_opp = !dec.opponent.is_empty();
    let opponent_mse = match (&truth_opponent, has_opp) {
        (Some(t), true) => Some(dec.opponent.iter().zip(t).map(|(p, t)| mse(p, t)).collect()),
        _ => None,
    };
    Ok(PredictionRollout {
        start,
        context,
        horizon,
        ego: dec.ego.iter().map(|t| to_obs(size, t)).collect(),
        opponent: has_opp.then(|| dec.opponent.iter().map(|t| to_obs(size, t)).collect()),
        truth_ego,
        truth_opponent,
        ego_mse,
        opponent_mse,
        reads,
    })
}

/// Filters every observation in `start..=t` with no open-loop segment.
pub fn closed_loop_prediction<T: Scalar>(agents: &Agents<T>, episode: &EpisodeRecord, start: usize, t: usize) -> Result<PredictionRollout> {
    if t < start {
        return Err(Error::Config(format!("step {t} precedes start {start}")));
    }
    open_loop_prediction(agents, episode, start, t - start + 1, 0)
}

const GAP: u32 = 2;

/// Writes a PNG grid: columns are steps; rows are truth and prediction for
/// the ego view, then for the opponent view when present. A red bar marks
/// the end of the context.
pub fn save_grid(rollout: &PredictionRollout, path: &Path) -> Result<()> {
    let mut rows: Vec<&[Observation]> = vec![&rollout.truth_ego, &rollout.ego];
    if let (Some(t), Some(p)) = (&rollout.truth_opponent, &rollout.opponent) {
        rows.push(t);
        rows.push(p);
    }
    let n = rollout.frames() as u32;
    let s = rollout.ego.first().map_or(1, |o| o.size) as u32;
    let width = n * (s + GAP) + GAP;
    let height = rows.len() as u32 * (s + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, frames) in rows.iter().enumerate() {
        for (c, o) in frames.iter().enumerate() {
            let (x0, y0) = (GAP + c as u32 * (s + GAP), GAP + r as u32 * (s + GAP));
            for y in 0..s {
                for x in 0..s {
                    img.put_pixel(x0 + x, y0 + y, Rgb(o.pixel(y as usize, x as usize)));
                }
            }
        }
    }
    if rollout.horizon > 0 {
        let x = rollout.context as u32 * (s + GAP);
        for y in 0..height {
            for dx in 0..GAP {
                img.put_pixel(x + dx, y, Rgb([220, 0, 0]));
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}
