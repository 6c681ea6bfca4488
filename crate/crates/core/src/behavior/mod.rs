//! Shared actor and critic over per-agent latent features, trained on
//! imagined self-play rollouts of the world model.

mod lambda;

pub use lambda::{lambda_return, lambda_return_vars};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::worldmodel::{Architecture, JointLatent, LatentVars, Noise, WorldModel, ACTION_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Imagination horizon H.
    pub horizon: usize,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub grad_clip: f64,
    /// Action standard deviation at initialization.
    pub init_std: f64,
    pub min_std: f64,
    /// Pre-squash action means are bounded to `±mean_scale`.
    pub mean_scale: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            horizon: 15,
            actor_lr: 8e-5,
            value_lr: 6e-4,
            grad_clip: 100.0,
            init_std: 5.0,
            min_std: 1e-4,
            mean_scale: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Draw from the action distribution.
    Sample,
    /// Deterministic `tanh(μ)`.
    Mode,
}

#[derive(Clone, Debug)]
pub struct Behavior<T: Scalar> {
    pub config: BehaviorConfig,
    pub arch: Architecture,
    pub actor_store: ParamStore<T>,
    pub value_store: ParamStore<T>,
    pub actor: Mlp,
    pub value: Mlp,
}

/// Imagined rollout as graph nodes. `features[τ]` is `[n·M, F]` (agent-major)
/// for `τ = 0..=H`; `rewards` and `returns` are `[H·n·M, 1]` ordered by `τ`.
pub struct Imagination {
    pub states: Vec<LatentVars>,
    pub actions: Vec<Var>,
    pub features: Vec<Var>,
    pub rewards: Var,
    pub values: Var,
    pub returns: Var,
    pub loss: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
    pub actor_grad_norm: f64,
    pub value_grad_norm: f64,
}

impl<T: Scalar> Behavior<T> {
    pub fn new(arch: &Architecture, config: BehaviorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_store = ParamStore::new();
        let mut value_store = ParamStore::new();
        let f = arch.feature();
        let actor = Mlp::with_output(
            &mut actor_store,
            "action",
            f,
            arch.action_hidden,
            arch.action_layers,
            2 * ACTION_DIM,
            arch.hidden_act,
            arch.action_out_act,
            &mut rng,
        );
        let value = Mlp::with_output(
            &mut value_store,
            "value",
            f,
            arch.value_hidden,
            arch.value_layers,
            1,
            arch.hidden_act,
            arch.value_out_act,
            &mut rng,
        );
        Self { config, arch: arch.clone(), actor_store, value_store, actor, value }
    }

    /// Pre-squash Gaussian `(mean, std)` for features `[N, F]`.
    pub fn action_dist(&self, g: &mut Graph<T>, features: Var) -> (Var, Var) {
        let out = self.actor.forward(g, &self.actor_store, features);
        let raw_mean = g.slice_cols(out, 0, ACTION_DIM);
        let raw_std = g.slice_cols(out, ACTION_DIM, ACTION_DIM);
        let c = &self.config;
        let scaled = g.scale(raw_mean, T::c(1.0 / c.mean_scale));
        let t = g.tanh(scaled);
        let mean = g.scale(t, T::c(c.mean_scale));
        let init = (c.init_std.exp() - 1.0).ln();
        let shifted = g.add_scalar(raw_std, T::c(init));
        let sp = g.softplus(shifted);
        let std = g.add_scalar(sp, T::c(c.min_std));
        (mean, std)
    }

    /// Squashed actions in `(-1, 1)^3`; `eps` selects sampling, `None` the mode.
    pub fn action_vars(&self, g: &mut Graph<T>, features: Var, eps: Option<Tensor<T>>) -> Var {
        let (mean, std) = self.action_dist(g, features);
        let pre = match eps {
            None => mean,
            Some(e) => {
                let e = g.constant(e);
                let se = g.mul(std, e);
                g.add(mean, se)
            }
        };
        g.tanh(pre)
    }

    pub fn value_vars(&self, g: &mut Graph<T>, features: Var) -> Var {
        self.value.forward(g, &self.value_store, features)
    }

    /// Policy actions for features `[N, F]`, with optional additive Gaussian
    /// exploration noise, clamped to `[-1, 1]`.
    pub fn act(&self, features: &Tensor<T>, mode: ActMode, explore_noise: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let n = features.rows();
        let eps = match mode {
            ActMode::Mode => None,
            ActMode::Sample => Some(normal(&[n, ACTION_DIM], rng)),
        };
        let a = self.action_vars(&mut g, f, eps);
        let v = g.value(a);
        (0..n)
            .map(|r| {
                let mut out = [0.0; 3];
                for (k, o) in out.iter_mut().enumerate() {
                    let mut x = v.data[r * ACTION_DIM + k].f64();
                    if explore_noise > 0.0 {
                        x += explore_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    *o = x.clamp(-1.0, 1.0);
                }
                out
            })
            .collect()
    }

    pub fn value(&self, features: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let v = self.value_vars(&mut g, f);
        g.value(v).clone()
    }

    /// Rolls the model forward `H` steps from `start` with both agents acting
    /// through the shared policy, and builds the actor loss
    /// `-mean(V_λ(s_τ))` over `τ < H`, agents and start states. The caller
    /// decides which parameter stores are frozen in `g`.
    pub fn imagine(
        &self,
        g: &mut Graph<T>,
        model: &WorldModel<T>,
        start: &JointLatent<T>,
        rng: &mut ChaCha8Rng,
        sample: bool,
    ) -> Result<Imagination> {
        let h = self.config.horizon;
        if h < 1 {
            return Err(Error::Config("imagination horizon must be at least 1".into()));
        }
        let n = model.n_agents();
        let m = start.batch();
        let s0 = LatentVars {
            deter: g.constant(start.deter.clone()),
            stoch: g.constant(start.stoch.clone()),
            mean: g.constant(start.mean.clone()),
            std: g.constant(start.std.clone()),
        };
        let mut states = vec![s0];
        let mut actions = Vec::with_capacity(h);
        let mut features = Vec::with_capacity(h + 1);
        let feat = |g: &mut Graph<T>, s: &LatentVars| {
            let parts: Vec<Var> = (0..n).map(|a| model.feature_vars(g, s, a)).collect();
            g.concat_rows(&parts)
        };
        features.push(feat(g, &states[0]));
        for tau in 0..h {
            let eps = sample.then(|| normal::<T>(&[n * m, ACTION_DIM], rng));
            let a_all = self.action_vars(g, features[tau], eps);
            let per_agent: Vec<Var> = (0..n).map(|a| g.slice_rows(a_all, a * m, m)).collect();
            let joint = g.concat(&per_agent);
            let mut noise = if sample { Noise::Sample(rng) } else { Noise::Mean };
            let next = model.imagine_vars(g, &states[tau], joint, &mut noise);
            actions.push(joint);
            states.push(next);
            features.push(feat(g, &next));
        }
        let future = g.concat_rows(&features[1..]);
        let rewards = model.reward.forward(g, &model.store, future);
        let all = g.concat_rows(&features);
        let values = self.value_vars(g, all);
        let rows = n * m;
        let r_steps: Vec<Var> = (0..h).map(|t| g.slice_rows(rewards, t * rows, rows)).collect();
        let v_steps: Vec<Var> = (0..=h).map(|t| g.slice_rows(values, t * rows, rows)).collect();
        let ret = lambda_return_vars(g, &r_steps, &v_steps, self.config.gamma, self.config.lambda)?;
        let returns = g.concat_rows(&ret);
        let mean = g.mean(returns);
        let loss = g.neg(mean);
        Ok(Imagination { states, actions, features, rewards, values, returns, loss })
    }

    /// Mean squared error between values of `features` and fixed `targets`.
    pub fn critic_loss(&self, g: &mut Graph<T>, features: Var, targets: Var) -> Var {
        let v = self.value_vars(g, features);
        let d = g.sub(v, targets);
        let sq = g.square(d);
        g.mean(sq)
    }

    /// One actor and one critic Adam step from imagined rollouts starting at
    /// `start`. Non-finite gradients leave both networks untouched.
    pub fn update(
        &mut self,
        model: &WorldModel<T>,
        start: &JointLatent<T>,
        actor_opt: &mut AdamState<T>,
        value_opt: &mut AdamState<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<BehaviorMetrics> {
        self.update_many(&[(model, start)], actor_opt, value_opt, rng)
    }

    /// As [`Behavior::update`], averaging the actor objective over several
    /// `(model, start)` pairs that share this policy.
    pub fn update_many(
        &mut self,
        sources: &[(&WorldModel<T>, &JointLatent<T>)],
        actor_opt: &mut AdamState<T>,
        value_opt: &mut AdamState<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<BehaviorMetrics> {
        if sources.is_empty() {
            return Err(Error::Config("behavior update needs at least one model".into()));
        }
        let h = self.config.horizon;
        let mut g = Graph::new();
        for (model, _) in sources {
            g.freeze(&model.store);
        }
        g.freeze(&self.value_store);
        let mut ims = Vec::with_capacity(sources.len());
        for (model, start) in sources {
            ims.push(self.imagine(&mut g, model, start, rng, true)?);
        }
        let losses: Vec<Var> = ims.iter().map(|im| im.loss).collect();
        let stacked = g.concat_rows(&losses);
        let loss = g.mean(stacked);
        let actor_loss = g.scalar(loss).f64();
        if !actor_loss.is_finite() {
            return Err(Error::NonFiniteLoss("actor".into()));
        }
        let grads = g.backward(loss);
        let actor_grads = g.param_grads(&self.actor_store, &grads);

        let mut cg = Graph::new();
        let mut feat_parts = Vec::new();
        let mut target_parts = Vec::new();
        for im in &ims {
            for &f in &im.features[..h] {
                feat_parts.push(cg.constant(g.value(f).clone()));
            }
            target_parts.push(cg.constant(g.value(im.returns).clone()));
        }
        let feats = cg.concat_rows(&feat_parts);
        let targets = cg.concat_rows(&target_parts);
        let value_loss_v = self.critic_loss(&mut cg, feats, targets);
        let value_loss = cg.scalar(value_loss_v).f64();
        if !value_loss.is_finite() {
            return Err(Error::NonFiniteLoss("critic".into()));
        }
        let vgrads = cg.backward(value_loss_v);
        let value_grads = cg.param_grads(&self.value_store, &vgrads);

        if !actor_grads.iter().chain(&value_grads).all(|t| t.is_finite()) {
            return Err(Error::NonFinite { what: "behavior gradients".into() });
        }
        let c = &self.config;
        let actor_grad_norm = Adam::new(c.actor_lr, c.grad_clip)
            .step(&mut self.actor_store, actor_opt, actor_grads)
            .map_err(|_| Error::NonFinite { what: "actor gradients".into() })?;
        let value_grad_norm = Adam::new(c.value_lr, c.grad_clip)
            .step(&mut self.value_store, value_opt, value_grads)
            .map_err(|_| Error::NonFinite { what: "value gradients".into() })?;
        let (mut sum, mut count) = (0.0, 0usize);
        for im in &ims {
            let r = g.value(im.rewards);
            sum += r.data.iter().map(|v| v.f64()).sum::<f64>();
            count += r.len();
        }
        Ok(BehaviorMetrics {
            actor_loss,
            value_loss,
            mean_return: -actor_loss,
            mean_reward: sum / count.max(1) as f64,
            actor_grad_norm,
            value_grad_norm,
        })
    }
}

pub(crate) fn normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect())
}
