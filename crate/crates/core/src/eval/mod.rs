//! Tournaments, solo skill evaluation and prediction diagnostics.

mod predict;

pub use predict::{closed_loop_prediction, open_loop_prediction, save_grid, EpisodeReader, PredictionRollout, CONTEXT, HORIZON};

use serde::{Deserialize, Serialize};

use crate::behavior::ActMode;
use crate::env::{Autopilot, EnvConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::{derive_seed, run_race, Agents, Driver, RandomDriver, ScriptedDriver};

/// Score difference below which a race is a draw.
pub const DRAW_TOLERANCE: f64 = 1e-9;

/// A participant that can field a driver for either car.
pub enum Contestant<T: Scalar> {
    Scripted { name: String, autopilot: Autopilot },
    Random { name: String },
    Learned { name: String, agents: Box<Agents<T>> },
}

impl<T: Scalar> Contestant<T> {
    pub fn scripted(name: impl Into<String>, autopilot: Autopilot) -> Self {
        Self::Scripted { name: name.into(), autopilot }
    }

    pub fn learned(name: impl Into<String>, agents: Agents<T>) -> Self {
        Self::Learned { name: name.into(), agents: Box::new(agents) }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Scripted { name, .. } | Self::Random { name } | Self::Learned { name, .. } => name,
        }
    }

    /// Evaluation driver: mode actions without exploration noise.
    pub fn driver(&self, agent: usize, seed: u64) -> Result<Box<dyn Driver + '_>> {
        Ok(match self {
            Self::Scripted { autopilot, .. } => Box::new(ScriptedDriver(*autopilot)),
            Self::Random { .. } => Box::new(RandomDriver::new(seed)),
            Self::Learned { agents, .. } => Box::new(agents.driver(agent, ActMode::Mode, 0.0, seed)?),
        })
    }

    fn check_env(&self, env: &EnvConfig) -> Result<()> {
        if let Self::Learned { name, agents } = self {
            let mut mine = agents.env.clone();
            mine.num_cars = env.num_cars;
            if &mine != env {
                return Err(Error::Config(format!("{name} was trained on a different environment config")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub seed: u64,
    /// Car index driven by side A.
    pub a_car: usize,
    pub score_a: f64,
    pub score_b: f64,
}

impl RaceResult {
    /// `Some(true)` if A won, `Some(false)` if B won, `None` for a draw.
    pub fn a_won(&self) -> Option<bool> {
        let d = self.score_a - self.score_b;
        (d.abs() > DRAW_TOLERANCE).then_some(d > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingResult {
    pub a: String,
    pub b: String,
    pub races: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub draws: usize,
    pub mean_score_a: f64,
    pub mean_score_b: f64,
    pub results: Vec<RaceResult>,
}

impl PairingResult {
    fn from_results(a: &str, b: &str, results: Vec<RaceResult>) -> Self {
        let n = results.len();
        let mut p = Self {
            a: a.into(),
            b: b.into(),
            races: n,
            wins_a: 0,
            wins_b: 0,
            draws: 0,
            mean_score_a: results.iter().map(|r| r.score_a).sum::<f64>() / n.max(1) as f64,
            mean_score_b: results.iter().map(|r| r.score_b).sum::<f64>() / n.max(1) as f64,
            results,
        };
        for r in &p.results {
            match r.a_won() {
                Some(true) => p.wins_a += 1,
                Some(false) => p.wins_b += 1,
                None => p.draws += 1,
            }
        }
        p
    }

    /// A's win ratio, counting draws as half a win.
    pub fn win_ratio_a(&self) -> f64 {
        (self.wins_a as f64 + 0.5 * self.draws as f64) / self.races.max(1) as f64
    }

    pub fn win_ratio_b(&self) -> f64 {
        1.0 - self.win_ratio_a()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.results.iter().map(|r| r.seed).collect()
    }
}

/// Seed of race `race` in pairing `pairing`.
pub fn race_seed(base: u64, pairing: usize, race: usize) -> u64 {
    derive_seed(base.wrapping_add(pairing as u64), 100 + race as u64)
}

/// Plays one race with A in car `a_car`.
pub fn play_race<T: Scalar>(a: &Contestant<T>, b: &Contestant<T>, env: &EnvConfig, seed: u64, a_car: usize) -> Result<RaceResult> {
    let mut da = a.driver(a_car, derive_seed(seed, 1))?;
    let mut db = b.driver(1 - a_car, derive_seed(seed, 2))?;
    let ep = {
        let mut drivers: [&mut dyn Driver; 2] = if a_car == 0 { [da.as_mut(), db.as_mut()] } else { [db.as_mut(), da.as_mut()] };
        run_race(env, seed, None, &mut drivers, 0, "tournament", None)?
    };
    Ok(RaceResult { seed, a_car, score_a: ep.score(a_car), score_b: ep.score(1 - a_car) })
}

/// `races` seeded races; A alternates between the two cars and grid slots
/// are drawn from each race seed.
pub fn play_pairing<T: Scalar>(
    a: &Contestant<T>,
    b: &Contestant<T>,
    env: &EnvConfig,
    races: usize,
    base_seed: u64,
    pairing: usize,
) -> Result<PairingResult> {
    if env.num_cars != 2 {
        return Err(Error::Config("tournament races need two cars".into()));
    }
    a.check_env(env)?;
    b.check_env(env)?;
    let results = (0..races)
        .map(|r| play_race(a, b, env, race_seed(base_seed, pairing, r), r % 2))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairingResult::from_results(a.name(), b.name(), results))
}

/// Every unordered pairing of distinct contestants.
pub fn round_robin<T: Scalar>(contestants: &[Contestant<T>], env: &EnvConfig, races: usize, base_seed: u64) -> Result<Vec<PairingResult>> {
    if contestants.len() < 2 {
        return Err(Error::Config("a round robin needs at least two contestants".into()));
    }
    for c in contestants {
        c.check_env(env)?;
    }
    let mut out = Vec::new();
    let mut k = 0;
    for i in 0..contestants.len() {
        for j in i + 1..contestants.len() {
            out.push(play_pairing(&contestants[i], &contestants[j], env, races, base_seed, k)?);
            k += 1;
        }
    }
    Ok(out)
}

/// Human-readable tournament table.
pub fn format_table(results: &[PairingResult]) -> String {
    let mut s = format!(
        "{:<20} {:<20} {:>6} {:>6} {:>6} {:>6} {:>9} {:>10} {:>10}\n",
        "A", "B", "races", "A wins", "B wins", "draws", "A ratio", "A score", "B score"
    );
    for p in results {
        s.push_str(&format!(
            "{:<20} {:<20} {:>6} {:>6} {:>6} {:>6} {:>9.3} {:>10.2} {:>10.2}\n",
            p.a,
            p.b,
            p.races,
            p.wins_a,
            p.wins_b,
            p.draws,
            p.win_ratio_a(),
            p.mean_score_a,
            p.mean_score_b
        ));
    }
    s
}

/// Normal-approximation 95% interval for a proportion.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n.max(1) as f64).sqrt();
    (p - half, p + half)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoloResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Races alone on `races` seeded tracks.
pub fn single_agent_eval<T: Scalar>(contestant: &Contestant<T>, env: &EnvConfig, races: usize, base_seed: u64) -> Result<SoloResult> {
    let env = EnvConfig { num_cars: 1, ..env.clone() };
    contestant.check_env(&env)?;
    let mut seeds = Vec::with_capacity(races);
    let mut scores = Vec::with_capacity(races);
    for r in 0..races {
        let seed = race_seed(base_seed, usize::MAX, r);
        let mut d = contestant.driver(0, derive_seed(seed, 1))?;
        let ep = run_race(&env, seed, None, &mut [d.as_mut()], r, "solo", None)?;
        seeds.push(seed);
        scores.push(ep.score(0));
    }
    let mean = scores.iter().sum::<f64>() / races.max(1) as f64;
    Ok(SoloResult { name: contestant.name().into(), seeds, scores, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_env() -> EnvConfig {
        EnvConfig { episode_length: 60, ..EnvConfig::desk() }
    }

    #[test]
    fn accounting_adds_up_and_reruns_match() {
        let a = Contestant::<f32>::scripted("fast", Autopilot::with_speed(16.0));
        let b = Contestant::<f32>::Random { name: "random".into() };
        let p = play_pairing(&a, &b, &short_env(), 4, 3, 0).unwrap();
        assert_eq!(p.wins_a + p.wins_b + p.draws, p.races);
        let q = play_pairing(&a, &b, &short_env(), 4, 3, 0).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn swapping_sides_swaps_statistics() {
        let a = Contestant::<f32>::scripted("fast", Autopilot::with_speed(16.0));
        let b = Contestant::<f32>::scripted("slow", Autopilot::with_speed(8.0));
        let ab = play_pairing(&a, &b, &short_env(), 2, 5, 0).unwrap();
        let ba = play_pairing(&b, &a, &short_env(), 2, 5, 0).unwrap();
        // same seeds, but the car alternation starts with the other side
        for (x, y) in ab.results.iter().zip(&ba.results) {
            assert_eq!(x.seed, y.seed);
        }
        let r = play_race(&b, &a, &short_env(), ab.results[0].seed, 1).unwrap();
        assert_eq!((r.score_a, r.score_b), (ab.results[0].score_b, ab.results[0].score_a));
    }

    #[test]
    fn round_robin_pairs_everyone_once() {
        let cs: Vec<Contestant<f32>> = [10.0, 12.0, 14.0].iter().map(|&v| Contestant::scripted(format!("s{v}"), Autopilot::with_speed(v))).collect();
        let r = round_robin(&cs, &short_env(), 2, 0).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.iter().map(|p| p.races).sum::<usize>(), 6);
        assert!(format_table(&r).lines().count() == 4);
    }

    #[test]
    fn scripted_beats_random_solo() {
        let env = short_env();
        let s = single_agent_eval(&Contestant::<f32>::scripted("s", Autopilot::default()), &env, 2, 0).unwrap();
        let r = single_agent_eval(&Contestant::<f32>::Random { name: "r".into() }, &env, 2, 0).unwrap();
        assert!(s.mean > r.mean);
        assert_eq!(s.seeds, r.seeds);
    }
}
