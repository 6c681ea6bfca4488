//! Joint recurrent state-space world model.
//!
//! Joint vectors are laid out in per-agent blocks: the deterministic state is
//! `[d¹, d²]`, the stochastic state `[s¹, s²]`, actions `[a¹, a²]` and
//! embeddings `[z¹, z²]`. With two agents every transition is evaluated in
//! both agent orders and the un-permuted outputs are averaged, so the result
//! does not depend on which agent is listed first.

mod arch;
mod loss;

pub use arch::{Architecture, ConvSpec, DeconvSpec};
pub use loss::{Combo, ComboBreakdown, LossGraph, ModelLossBreakdown, Rollout, SequenceBatch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Deconv2d, Dense, GruCell, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// 1 for a per-agent model, 2 for a joint model.
    pub n_agents: usize,
    /// Adds the head predicting the opponent's embedding from the ego view.
    pub observer: bool,
    /// KL weight.
    pub beta: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(1..=2).contains(&self.n_agents) {
            return Err(Error::Config("n_agents must be 1 or 2".into()));
        }
        if self.observer && self.n_agents != 2 {
            return Err(Error::Config("the observer head needs a two-agent model".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Source of the Gaussian noise used to sample stochastic states.
pub enum Noise<'a> {
    /// Use distribution means.
    Mean,
    Sample(&'a mut ChaCha8Rng),
}

impl Noise<'_> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Option<Tensor<T>> {
        match self {
            Noise::Mean => None,
            Noise::Sample(rng) => {
                let n = shape.iter().product();
                Some(Tensor::new(shape.to_vec(), (0..n).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect()))
            }
        }
    }
}

/// Latent state as graph nodes; rows are batch entries.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub deter: Var,
    pub stoch: Var,
    pub mean: Var,
    pub std: Var,
}

/// Latent state values: `deter` is `[B, n·D]`, the others `[B, n·S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLatent<T> {
    pub deter: Tensor<T>,
    pub stoch: Tensor<T>,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

impl<T: Scalar> JointLatent<T> {
    /// Zero state. The standard deviation is set to one.
    pub fn zeros(batch: usize, n_agents: usize, arch: &Architecture) -> Self {
        let s = [batch, n_agents * arch.stoch];
        Self {
            deter: Tensor::zeros(&[batch, n_agents * arch.deter]),
            stoch: Tensor::zeros(&s),
            mean: Tensor::zeros(&s),
            std: Tensor::full(&s, T::one()),
        }
    }

    pub fn batch(&self) -> usize {
        self.deter.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.deter.is_finite() && self.stoch.is_finite() && self.mean.is_finite() && self.std.is_finite()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LatentVars {
        LatentVars {
            deter: g.constant(self.deter.clone()),
            stoch: g.constant(self.stoch.clone()),
            mean: g.constant(self.mean.clone()),
            std: g.constant(self.std.clone()),
        }
    }

    pub fn read(g: &Graph<T>, v: &LatentVars) -> Self {
        Self {
            deter: g.value(v.deter).clone(),
            stoch: g.value(v.stoch).clone(),
            mean: g.value(v.mean).clone(),
            std: g.value(v.std).clone(),
        }
    }

    /// Agent `a`'s `[deter, stoch]` feature rows.
    pub fn feature(&self, a: usize, arch: &Architecture) -> Tensor<T> {
        let (d, s) = (arch.deter, arch.stoch);
        let rows = self.batch();
        let mut data = Vec::with_capacity(rows * (d + s));
        for r in 0..rows {
            data.extend_from_slice(&self.deter.row(r)[a * d..(a + 1) * d]);
            data.extend_from_slice(&self.stoch.row(r)[a * s..(a + 1) * s]);
        }
        Tensor::new(vec![rows, d + s], data)
    }

    /// Exchanges the two agents' blocks.
    pub fn swapped(&self) -> Self {
        Self { deter: swap_host(&self.deter), stoch: swap_host(&self.stoch), mean: swap_host(&self.mean), std: swap_host(&self.std) }
    }
}

/// Exchanges the two halves of every row.
pub fn swap_host<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let h = c / 2;
    let mut data = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        data.extend_from_slice(&row[h..]);
        data.extend_from_slice(&row[..h]);
    }
    Tensor::new(t.shape.clone(), data)
}

/// Ego embedding and, with the observer head, the predicted opponent embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub ego: Tensor<T>,
    pub opponent: Option<Tensor<T>>,
}

/// Stacks observations into a `[N, H, W, 3]` tensor with values in `[0, 1]`.
pub fn obs_tensor<T: Scalar>(obs: &[&Observation]) -> Tensor<T> {
    let size = obs.first().map(|o| o.size).unwrap_or(0);
    let mut data = Vec::with_capacity(obs.len() * size * size * 3);
    for o in obs {
        data.extend(o.to_unit::<T>());
    }
    Tensor::new(vec![obs.len(), size, size, 3], data)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<Conv2d>,
}

impl Encoder {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, arch: &Architecture, rng: &mut R) -> Self {
        let mut in_c = 3;
        let layers = arch
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let c = Conv2d::new(store, &format!("{name}.cv{}", i + 1), in_c, l.out_c, l.kernel, l.stride, l.act, rng);
                in_c = l.out_c;
                c
            })
            .collect();
        Self { layers }
    }

    /// `[N, H, W, 3]` to `[N, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.layers.iter().fold(x, |h, l| l.forward(g, store, h));
        let shape = g.shape(h).to_vec();
        g.reshape(h, &[shape[0], shape[1..].iter().product()])
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub seed: Dense,
    pub layers: Vec<Deconv2d>,
}

impl Decoder {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, arch: &Architecture, rng: &mut R) -> Self {
        let seed = Dense::new(store, "decoder.fc1", arch.feature(), arch.decoder_seed, Activation::None, rng);
        let mut in_c = arch.decoder_seed;
        let layers = arch
            .decoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let d = Deconv2d::new(store, &format!("decoder.dc{}", i + 1), in_c, l.out_c, l.kernel, l.stride, l.out_pad, l.act, rng);
                in_c = l.out_c;
                d
            })
            .collect();
        Self { seed, layers }
    }

    /// `[N, D + S]` to `[N, H, W, 3]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Var {
        let h = self.seed.forward(g, store, features);
        let n = g.shape(h)[0];
        let h = g.reshape(h, &[n, 1, 1, self.seed.out_dim]);
        self.layers.iter().fold(h, |h, l| l.forward(g, store, h))
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub opponent_encoder: Option<Encoder>,
    pub img_fc1: Dense,
    pub gru: GruCell,
    pub img_fc2: Dense,
    pub img_out: Dense,
    pub obs_fc1: Dense,
    pub obs_out: Dense,
    pub decoder: Decoder,
    pub reward: Mlp,
}

impl<T: Scalar> WorldModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = &config.arch;
        let n = config.n_agents;
        let encoder = Encoder::new(&mut store, "encoder", a, &mut rng);
        let opponent_encoder = config.observer.then(|| Encoder::new(&mut store, "opponent_encoder", a, &mut rng));
        let (hid, det, sto) = (n * a.hidden, n * a.deter, n * a.stoch);
        let img_fc1 = Dense::new(&mut store, "imagine.fc1", sto + n * ACTION_DIM, hid, a.hidden_act, &mut rng);
        let gru = GruCell::new(&mut store, "imagine.gru", hid, det, &mut rng);
        let img_fc2 = Dense::new(&mut store, "imagine.fc2", det, hid, a.hidden_act, &mut rng);
        let img_out = Dense::new(&mut store, "imagine.out", hid, 2 * sto, Activation::None, &mut rng);
        let obs_fc1 = Dense::new(&mut store, "observe.fc1", det + n * a.embed(), hid, a.hidden_act, &mut rng);
        let obs_out = Dense::new(&mut store, "observe.out", hid, 2 * sto, Activation::None, &mut rng);
        let decoder = Decoder::new(&mut store, a, &mut rng);
        let reward = Mlp::with_output(
            &mut store,
            "reward",
            a.feature(),
            a.reward_hidden,
            a.reward_layers,
            1,
            a.hidden_act,
            a.reward_out_act,
            &mut rng,
        );
        Ok(Self { config, store, encoder, opponent_encoder, img_fc1, gru, img_fc2, img_out, obs_fc1, obs_out, decoder, reward })
    }

    pub fn arch(&self) -> &Architecture {
        &self.config.arch
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    pub fn zero_state(&self, batch: usize) -> JointLatent<T> {
        JointLatent::zeros(batch, self.n_agents(), self.arch())
    }

    fn swap(&self, g: &mut Graph<T>, v: Var) -> Var {
        let h = g.shape(v)[1] / 2;
        let a = g.slice_cols(v, 0, h);
        let b = g.slice_cols(v, h, h);
        g.concat(&[b, a])
    }

    fn gaussian(&self, g: &mut Graph<T>, out: Var) -> (Var, Var) {
        let s = self.n_agents() * self.arch().stoch;
        let mean = g.slice_cols(out, 0, s);
        let raw = g.slice_cols(out, s, s);
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, T::c(self.arch().min_std));
        (mean, std)
    }

    /// One imagine pass in the given agent order: `(deter, mean, std)`.
    pub fn transition_pass(&self, g: &mut Graph<T>, stoch: Var, deter: Var, action: Var) -> (Var, Var, Var) {
        let s = &self.store;
        let x = g.concat(&[stoch, action]);
        let h = self.img_fc1.forward(g, s, x);
        let d = self.gru.forward(g, s, h, deter);
        let h2 = self.img_fc2.forward(g, s, d);
        let out = self.img_out.forward(g, s, h2);
        let (m, sd) = self.gaussian(g, out);
        (d, m, sd)
    }

    /// One observe pass in the given agent order: `(mean, std)`.
    pub fn posterior_pass(&self, g: &mut Graph<T>, deter: Var, embed: Var) -> (Var, Var) {
        let s = &self.store;
        let x = g.concat(&[deter, embed]);
        let h = self.obs_fc1.forward(g, s, x);
        let out = self.obs_out.forward(g, s, h);
        self.gaussian(g, out)
    }

    fn average_swapped(&self, g: &mut Graph<T>, a: Var, b_flipped: Var) -> Var {
        let b = self.swap(g, b_flipped);
        let s = g.add(a, b);
        g.scale(s, T::c(0.5))
    }

    /// Order-independent transition: `(deter, mean, std)`.
    pub fn symmetrized_transition(&self, g: &mut Graph<T>, stoch: Var, deter: Var, action: Var) -> (Var, Var, Var) {
        let (d1, m1, s1) = self.transition_pass(g, stoch, deter, action);
        if self.n_agents() == 1 {
            return (d1, m1, s1);
        }
        let (fs, fd, fa) = (self.swap(g, stoch), self.swap(g, deter), self.swap(g, action));
        let (d2, m2, s2) = self.transition_pass(g, fs, fd, fa);
        (self.average_swapped(g, d1, d2), self.average_swapped(g, m1, m2), self.average_swapped(g, s1, s2))
    }

    /// Order-independent posterior: `(mean, std)`.
    pub fn symmetrized_posterior(&self, g: &mut Graph<T>, deter: Var, embed: Var) -> (Var, Var) {
        let (m1, s1) = self.posterior_pass(g, deter, embed);
        if self.n_agents() == 1 {
            return (m1, s1);
        }
        let (fd, fe) = (self.swap(g, deter), self.swap(g, embed));
        let (m2, s2) = self.posterior_pass(g, fd, fe);
        (self.average_swapped(g, m1, m2), self.average_swapped(g, s1, s2))
    }

    fn sample(&self, g: &mut Graph<T>, mean: Var, std: Var, noise: &mut Noise) -> Var {
        let shape = g.shape(mean).to_vec();
        match noise.normal::<T>(&shape) {
            None => mean,
            Some(eps) => {
                let e = g.constant(eps);
                let se = g.mul(std, e);
                g.add(mean, se)
            }
        }
    }

    /// Prior step from `prev` under joint `action` (`[B, n·3]`).
    pub fn imagine_vars(&self, g: &mut Graph<T>, prev: &LatentVars, action: Var, noise: &mut Noise) -> LatentVars {
        let (deter, mean, std) = self.symmetrized_transition(g, prev.stoch, prev.deter, action);
        let stoch = self.sample(g, mean, std, noise);
        LatentVars { deter, stoch, mean, std }
    }

    /// Posterior for the deterministic state of `prior` given joint `embed`.
    pub fn observe_vars(&self, g: &mut Graph<T>, prior: &LatentVars, embed: Var, noise: &mut Noise) -> LatentVars {
        let (mean, std) = self.symmetrized_posterior(g, prior.deter, embed);
        let stoch = self.sample(g, mean, std, noise);
        LatentVars { deter: prior.deter, stoch, mean, std }
    }

    /// Agent `a`'s `[deter, stoch]` feature rows.
    pub fn feature_vars(&self, g: &mut Graph<T>, state: &LatentVars, a: usize) -> Var {
        let (d, s) = (self.arch().deter, self.arch().stoch);
        let dv = g.slice_cols(state.deter, a * d, d);
        let sv = g.slice_cols(state.stoch, a * s, s);
        g.concat(&[dv, sv])
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.arch().image_size;
        if images.shape.len() != 4 || images.shape[1..] != [s, s, 3] {
            return Err(Error::Shape(format!("expected [N, {s}, {s}, 3] images, got {:?}", images.shape)));
        }
        Ok(())
    }

    /// Encodes `[N, H, W, 3]` images.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Embedding<T>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let ego = self.encoder.forward(&mut g, &self.store, x);
        let opp = self.opponent_encoder.as_ref().map(|e| e.forward(&mut g, &self.store, x));
        Ok(Embedding { ego: g.value(ego).clone(), opponent: opp.map(|v| g.value(v).clone()) })
    }

    fn check_finite(&self, what: &str, t: &Tensor<T>) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { what: what.to_string() })
        }
    }

    fn check_state(&self, prev: &JointLatent<T>, actions: &Tensor<T>) -> Result<()> {
        let n = self.n_agents();
        let a = self.arch();
        let b = prev.batch();
        if prev.deter.shape != [b, n * a.deter] || prev.stoch.shape != [b, n * a.stoch] {
            return Err(Error::Shape(format!("latent state {:?}/{:?}", prev.deter.shape, prev.stoch.shape)));
        }
        if actions.shape != [b, n * ACTION_DIM] {
            return Err(Error::Shape(format!("actions {:?}, expected [{b}, {}]", actions.shape, n * ACTION_DIM)));
        }
        if !prev.is_finite() {
            return Err(Error::NonFinite { what: "latent state".into() });
        }
        self.check_finite("actions", actions)
    }

    /// Prior transition.
    pub fn imagine_step(&self, prev: &JointLatent<T>, actions: &Tensor<T>, noise: &mut Noise) -> Result<JointLatent<T>> {
        self.check_state(prev, actions)?;
        let mut g = Graph::new();
        let p = prev.bind(&mut g);
        let a = g.constant(actions.clone());
        let next = self.imagine_vars(&mut g, &p, a, noise);
        Ok(JointLatent::read(&g, &next))
    }

    /// Prior transition followed by the posterior update; returns `(posterior, prior)`.
    pub fn observe_step(
        &self,
        prev: &JointLatent<T>,
        actions: &Tensor<T>,
        embed: &Tensor<T>,
        noise: &mut Noise,
    ) -> Result<(JointLatent<T>, JointLatent<T>)> {
        self.check_state(prev, actions)?;
        let want = [prev.batch(), self.n_agents() * self.arch().embed()];
        if embed.shape != want {
            return Err(Error::Shape(format!("embedding {:?}, expected {want:?}", embed.shape)));
        }
        self.check_finite("embedding", embed)?;
        let mut g = Graph::new();
        let p = prev.bind(&mut g);
        let a = g.constant(actions.clone());
        let e = g.constant(embed.clone());
        let prior = self.imagine_vars(&mut g, &p, a, noise);
        let post = self.observe_vars(&mut g, &prior, e, noise);
        Ok((JointLatent::read(&g, &post), JointLatent::read(&g, &prior)))
    }

    fn check_features(&self, f: &Tensor<T>) -> Result<()> {
        if f.shape.len() != 2 || f.cols() != self.arch().feature() {
            return Err(Error::Shape(format!("features {:?}, expected [N, {}]", f.shape, self.arch().feature())));
        }
        Ok(())
    }

    /// Image means `[N, H, W, 3]` for per-agent features `[N, D + S]`.
    pub fn decode(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let img = self.decoder.forward(&mut g, &self.store, f);
        Ok(g.value(img).clone())
    }

    /// Reward means `[N, 1]` for per-agent features.
    pub fn predict_reward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let r = self.reward.forward(&mut g, &self.store, f);
        Ok(g.value(r).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, observer: bool) -> WorldModel<f64> {
        WorldModel::new(ModelConfig { arch: Architecture::tiny(), n_agents: n, observer, beta: 1.0 }, 3).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_state(m: &WorldModel<f64>, b: usize, rng: &mut ChaCha8Rng) -> JointLatent<f64> {
        let a = m.arch();
        let n = m.n_agents();
        JointLatent {
            deter: random(&[b, n * a.deter], rng),
            stoch: random(&[b, n * a.stoch], rng),
            mean: Tensor::zeros(&[b, n * a.stoch]),
            std: Tensor::full(&[b, n * a.stoch], 1.0),
        }
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let m = tiny(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random(&[2, 16, 16, 3], &mut rng);
        let e = m.encode(&img).unwrap();
        assert_eq!(e.ego.shape, vec![2, 72]);
        assert_eq!(e.opponent.as_ref().unwrap().shape, vec![2, 72]);
        assert_eq!(e, m.encode(&img).unwrap());
        assert!(m.encode(&random(&[1, 8, 8, 3], &mut rng)).is_err());
    }

    #[test]
    fn mean_mode_posterior_uses_mean() {
        let m = tiny(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = random_state(&m, 3, &mut rng);
        let act = random(&[3, 6], &mut rng);
        let emb = random(&[3, 144], &mut rng);
        let (post, prior) = m.observe_step(&prev, &act, &emb, &mut Noise::Mean).unwrap();
        assert_eq!(post.stoch, post.mean);
        assert_eq!(post.deter, prior.deter);
        assert!(post.std.data.iter().chain(&prior.std.data).all(|&s| s >= 0.1));
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = tiny(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = random_state(&m, 2, &mut rng);
        let act = random(&[2, 6], &mut rng);
        let a = m.imagine_step(&prev, &act, &mut Noise::Sample(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
        let b = m.imagine_step(&prev, &act, &mut Noise::Sample(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.stoch, a.mean);
    }

    #[test]
    fn swapped_input_gives_swapped_output() {
        let m = tiny(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = random_state(&m, 4, &mut rng);
        let act = random(&[4, 6], &mut rng);
        let a = m.imagine_step(&prev, &act, &mut Noise::Mean).unwrap();
        let b = m.imagine_step(&prev.swapped(), &swap_host(&act), &mut Noise::Mean).unwrap();
        assert_eq!(a.swapped(), b);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let m = tiny(1, false);
        let prev = m.zero_state(1);
        let act = Tensor::new(vec![1, 3], vec![f64::NAN, 0.0, 0.0]);
        assert!(matches!(m.imagine_step(&prev, &act, &mut Noise::Mean), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn decoder_and_reward_shapes() {
        let m = tiny(1, false);
        let f = Tensor::zeros(&[5, 12]);
        assert_eq!(m.decode(&f).unwrap().shape, vec![5, 16, 16, 3]);
        assert_eq!(m.predict_reward(&f).unwrap().shape, vec![5, 1]);
    }

    #[test]
    fn observer_requires_two_agents() {
        let cfg = ModelConfig { arch: Architecture::tiny(), n_agents: 1, observer: true, beta: 1.0 };
        assert!(WorldModel::<f32>::new(cfg, 0).is_err());
    }
}
