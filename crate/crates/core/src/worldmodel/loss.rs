use serde::{Deserialize, Serialize};

use super::{LatentVars, Noise, WorldModel, ACTION_DIM};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source of each agent's embedding in a posterior rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combo {
    /// Both agents' own embeddings `(z¹, z²)`.
    Truth,
    /// Agent 2's embedding predicted from agent 1's view `(z¹, z̃²)`.
    PredictSecond,
    /// Agent 1's embedding predicted from agent 2's view `(z̃¹, z²)`.
    PredictFirst,
}

impl Combo {
    pub fn weight(self) -> f64 {
        match self {
            Combo::Truth => 2.0,
            Combo::PredictSecond | Combo::PredictFirst => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Combo::Truth => "truth",
            Combo::PredictSecond => "predict_second",
            Combo::PredictFirst => "predict_first",
        }
    }
}

/// Time-major training sequences: row `t·B + b` holds step `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    pub length: usize,
    pub batch: usize,
    /// Per agent `[L·B, H, W, 3]`.
    pub obs: Vec<Tensor<T>>,
    /// Joint action that led into each step, `[L·B, n·3]`.
    pub prev_actions: Tensor<T>,
    /// Reward received on entering each step, `[L·B, n]`.
    pub prev_rewards: Tensor<T>,
    /// 0 where no previous reward exists, else 1; `[L·B, 1]`.
    pub reward_mask: Tensor<T>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn rows(&self) -> usize {
        self.length * self.batch
    }

    pub fn validate(&self, n_agents: usize, image_size: usize) -> Result<()> {
        let r = self.rows();
        if r == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if self.obs.len() != n_agents {
            return Err(Error::Shape(format!("{} observation streams for {n_agents} agents", self.obs.len())));
        }
        for o in &self.obs {
            if o.shape != [r, image_size, image_size, 3] {
                return Err(Error::Shape(format!("observations {:?}, expected [{r}, {image_size}, {image_size}, 3]", o.shape)));
            }
        }
        if self.prev_actions.shape != [r, n_agents * ACTION_DIM]
            || self.prev_rewards.shape != [r, n_agents]
            || self.reward_mask.shape != [r, 1]
        {
            return Err(Error::Shape("action, reward or mask shape does not match the batch".into()));
        }
        Ok(())
    }
}

/// Stacked rollout outputs; every field is `[L·B, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Rollout {
    pub deter: Var,
    pub stoch: Var,
    pub post_mean: Var,
    pub post_std: Var,
    pub prior_mean: Var,
    pub prior_std: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ComboTerms {
    pub combo: Combo,
    /// Per-step means over the batch.
    pub j_o: Var,
    pub j_r: Var,
    pub j_d: Var,
    /// `[n·L·B, H, W, 3]`, agent-major.
    pub decoded: Var,
    /// `[n·L·B, 1]`, agent-major.
    pub rewards: Var,
    pub rollout: Rollout,
}

pub struct LossGraph {
    /// Minimization loss: the negated weighted objective.
    pub loss: Var,
    pub terms: Vec<ComboTerms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboBreakdown {
    pub combo: Combo,
    pub weight: f64,
    pub j_o: f64,
    pub j_r: f64,
    pub j_d: f64,
    pub j_m: f64,
}

/// `j_*` are weighted sums over combinations; `total = -(j_o + j_r + j_d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLossBreakdown {
    pub j_o: f64,
    pub j_r: f64,
    pub j_d: f64,
    pub total: f64,
    pub combos: Vec<ComboBreakdown>,
}

impl ModelLossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.j_o.is_finite() && self.j_r.is_finite() && self.j_d.is_finite()
    }

    /// Name of the first non-finite term, if any.
    pub fn offending_term(&self) -> Option<String> {
        for c in &self.combos {
            for (name, v) in [("J_O", c.j_o), ("J_R", c.j_r), ("J_D", c.j_d)] {
                if !v.is_finite() {
                    return Some(format!("{} {name}", c.combo.label()));
                }
            }
        }
        (!self.total.is_finite()).then(|| "total".to_string())
    }
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> ModelLossBreakdown {
        let combos: Vec<ComboBreakdown> = self
            .terms
            .iter()
            .map(|t| {
                let (o, r, d) = (g.scalar(t.j_o).f64(), g.scalar(t.j_r).f64(), g.scalar(t.j_d).f64());
                ComboBreakdown { combo: t.combo, weight: t.combo.weight(), j_o: o, j_r: r, j_d: d, j_m: o + r + d }
            })
            .collect();
        let ws = |f: fn(&ComboBreakdown) -> f64| combos.iter().map(|c| c.weight * f(c)).sum::<f64>();
        ModelLossBreakdown {
            j_o: ws(|c| c.j_o),
            j_r: ws(|c| c.j_r),
            j_d: ws(|c| c.j_d),
            total: g.scalar(self.loss).f64(),
            combos,
        }
    }

    /// Rollout driven by the agents' own embeddings.
    pub fn posterior(&self) -> &Rollout {
        &self.terms[0].rollout
    }
}

impl<T: Scalar> WorldModel<T> {
    pub fn combos(&self) -> Vec<Combo> {
        if self.config.observer {
            vec![Combo::Truth, Combo::PredictSecond, Combo::PredictFirst]
        } else {
            vec![Combo::Truth]
        }
    }

    /// Filters `length` steps from the zero state. `embed` and `prev_actions`
    /// are time-major `[L·B, ·]`.
    pub fn posterior_rollout(
        &self,
        g: &mut Graph<T>,
        embed: Var,
        prev_actions: Var,
        length: usize,
        batch: usize,
        noise: &mut Noise,
    ) -> Rollout {
        let mut state = self.zero_state(batch).bind(g);
        let mut cols: [Vec<Var>; 6] = Default::default();
        for t in 0..length {
            let a = g.slice_rows(prev_actions, t * batch, batch);
            let z = g.slice_rows(embed, t * batch, batch);
            let prior = self.imagine_vars(g, &state, a, noise);
            let post = self.observe_vars(g, &prior, z, noise);
            for (c, v) in cols.iter_mut().zip([post.deter, post.stoch, post.mean, post.std, prior.mean, prior.std]) {
                c.push(v);
            }
            state = post;
        }
        let [d, s, pm, ps, qm, qs] = cols.map(|c| g.concat_rows(&c));
        Rollout { deter: d, stoch: s, post_mean: pm, post_std: ps, prior_mean: qm, prior_std: qs }
    }

    fn combo_embeddings(&self, g: &mut Graph<T>, batch: &SequenceBatch<T>) -> Vec<(Combo, Var)> {
        let n = self.n_agents();
        let rows = batch.rows();
        let all = {
            let parts: Vec<Var> = batch.obs.iter().map(|o| g.constant(o.clone())).collect();
            g.concat_rows(&parts)
        };
        let ego_all = self.encoder.forward(g, &self.store, all);
        let ego: Vec<Var> = (0..n).map(|a| g.slice_rows(ego_all, a * rows, rows)).collect();
        let mut out = vec![(Combo::Truth, g.concat(&ego))];
        if let Some(enc) = &self.opponent_encoder {
            let opp_all = enc.forward(g, &self.store, all);
            let from1 = g.slice_rows(opp_all, 0, rows);
            let from2 = g.slice_rows(opp_all, rows, rows);
            out.push((Combo::PredictSecond, g.concat(&[ego[0], from1])));
            out.push((Combo::PredictFirst, g.concat(&[from2, ego[1]])));
        }
        out
    }

    /// Weighted representation objective over all embedding combinations,
    /// negated for minimization. Terms are means over the `L·B` steps.
    pub fn representation_loss(&self, g: &mut Graph<T>, batch: &SequenceBatch<T>, noise: &mut Noise) -> Result<LossGraph> {
        let n = self.n_agents();
        batch.validate(n, self.arch().image_size)?;
        let rows = batch.rows();
        let inv_rows = T::c(1.0 / rows as f64);
        let half = T::c(-0.5);

        let target_img = {
            let mut data = Vec::with_capacity(n * batch.obs[0].len());
            for o in &batch.obs {
                data.extend_from_slice(&o.data);
            }
            let mut shape = batch.obs[0].shape.clone();
            shape[0] *= n;
            g.constant(Tensor::new(shape, data))
        };
        let (target_r, mask) = {
            let mut r = Vec::with_capacity(n * rows);
            let mut m = Vec::with_capacity(n * rows);
            for a in 0..n {
                for i in 0..rows {
                    r.push(batch.prev_rewards.data[i * n + a]);
                    m.push(batch.reward_mask.data[i]);
                }
            }
            (g.constant(Tensor::new(vec![n * rows, 1], r)), g.constant(Tensor::new(vec![n * rows, 1], m)))
        };
        let prev_actions = g.constant(batch.prev_actions.clone());

        let mut terms = Vec::new();
        for (combo, embed) in self.combo_embeddings(g, batch) {
            let ro = self.posterior_rollout(g, embed, prev_actions, batch.length, batch.batch, noise);
            let state = LatentVars { deter: ro.deter, stoch: ro.stoch, mean: ro.post_mean, std: ro.post_std };
            let feats: Vec<Var> = (0..n).map(|a| self.feature_vars(g, &state, a)).collect();
            let feats = g.concat_rows(&feats);

            let decoded = self.decoder.forward(g, &self.store, feats);
            let diff = g.sub(decoded, target_img);
            let sq = g.square(diff);
            let sse = g.sum(sq);
            let j_o = g.scale(sse, half * inv_rows);

            let rewards = self.reward.forward(g, &self.store, feats);
            let rd = g.sub(rewards, target_r);
            let rsq = g.square(rd);
            let rm = g.mul(rsq, mask);
            let rs = g.sum(rm);
            let j_r = g.scale(rs, half * inv_rows);

            let kl = gaussian_kl(g, ro.post_mean, ro.post_std, ro.prior_mean, ro.prior_std);
            let j_d = g.scale(kl, T::c(-self.config.beta) * inv_rows);

            terms.push(ComboTerms { combo, j_o, j_r, j_d, decoded, rewards, rollout: ro });
        }
        let mut parts = Vec::new();
        for t in &terms {
            let s1 = g.add(t.j_o, t.j_r);
            let s2 = g.add(s1, t.j_d);
            parts.push(g.scale(s2, T::c(-t.combo.weight())));
        }
        let mut loss = parts[0];
        for &p in &parts[1..] {
            loss = g.add(loss, p);
        }
        let out = LossGraph { loss, terms };
        let b = out.breakdown(g);
        if let Some(term) = b.offending_term() {
            return Err(Error::NonFiniteLoss(term));
        }
        Ok(out)
    }
}

/// Summed KL(q ‖ p) between diagonal Gaussians.
pub fn gaussian_kl<T: Scalar>(g: &mut Graph<T>, q_mean: Var, q_std: Var, p_mean: Var, p_std: Var) -> Var {
    let ln_p = g.ln(p_std);
    let ln_q = g.ln(q_std);
    let log_ratio = g.sub(ln_p, ln_q);
    let q_var = g.square(q_std);
    let dm = g.sub(q_mean, p_mean);
    let dm2 = g.square(dm);
    let num = g.add(q_var, dm2);
    let p_var = g.square(p_std);
    let inv = g.recip(p_var);
    let frac = g.mul(num, inv);
    let half_frac = g.scale(frac, T::c(0.5));
    let per = g.add(log_ratio, half_frac);
    let per = g.add_scalar(per, T::c(-0.5));
    g.sum(per)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::worldmodel::{Architecture, ModelConfig};

    fn batch(n: usize, l: usize, b: usize, rng: &mut ChaCha8Rng) -> SequenceBatch<f64> {
        let r = l * b;
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let k: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..k).map(|_| rng.gen_range(lo..hi)).collect())
        };
        SequenceBatch {
            length: l,
            batch: b,
            obs: (0..n).map(|_| t(&[r, 16, 16, 3], 0.0, 1.0)).collect(),
            prev_actions: t(&[r, n * 3], -1.0, 1.0),
            prev_rewards: t(&[r, n], -0.1, 5.0),
            reward_mask: Tensor::full(&[r, 1], 1.0),
        }
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]));
        let s = g.constant(Tensor::new(vec![1, 3], vec![0.2, 1.0, 3.0]));
        let kl = gaussian_kl(&mut g, m, s, m, s);
        assert_eq!(g.scalar(kl), 0.0);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let mut v = |lo: f64, hi: f64| g.constant(Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(lo..hi)).collect()));
            let (qm, qs, pm, ps) = (v(-2.0, 2.0), v(0.1, 3.0), v(-2.0, 2.0), v(0.1, 3.0));
            let kl = gaussian_kl(&mut g, qm, qs, pm, ps);
            assert!(g.scalar(kl) >= 0.0);
        }
    }

    #[test]
    fn breakdown_total_matches_terms() {
        let m = WorldModel::<f64>::new(ModelConfig { arch: Architecture::tiny(), n_agents: 2, observer: true, beta: 1.0 }, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(2, 3, 2, &mut rng);
        let mut g = Graph::new();
        let lg = m.representation_loss(&mut g, &b, &mut Noise::Mean).unwrap();
        let br = lg.breakdown(&g);
        assert_eq!(br.combos.len(), 3);
        assert!((br.total + br.j_o + br.j_r + br.j_d).abs() < 1e-9 * br.total.abs().max(1.0));
        assert!(br.j_d <= 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = WorldModel::<f64>::new(ModelConfig { arch: Architecture::tiny(), n_agents: 1, observer: false, beta: 1.0 }, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batch(2, 2, 2, &mut rng);
        let mut g = Graph::new();
        assert!(matches!(m.representation_loss(&mut g, &b, &mut Noise::Mean), Err(Error::Shape(_))));
    }
}
