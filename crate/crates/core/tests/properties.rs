use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlc_core::behavior::{lambda_return, ActMode, Behavior, BehaviorConfig};
use dlc_core::env::{self, EnvAction, EnvConfig, Observation};
use dlc_core::trainer::{EpisodeMeta, EpisodeRecord, ReplayMemory};
use dlc_core::worldmodel::{Architecture, JointLatent, ModelConfig, Noise, WorldModel};
use dlc_core::Tensor;

/// Episode whose reward at step `t` encodes `(index, t)`.
fn tagged(index: usize, len: usize) -> EpisodeRecord {
    let meta = EpisodeMeta { index, seed: index as u64, num_agents: 1, image_size: 2, source: "test".into() };
    let mut e = EpisodeRecord::new(meta);
    for t in 0..len {
        e.observations[0].push(Observation::blank(2));
        e.actions[0].push([t as f64 / 1000.0, 0.0, 0.0]);
        e.rewards[0].push((index * 10_000 + t) as f64);
    }
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_windows_stay_inside_one_episode(
        lens in prop::collection::vec(1usize..40, 1..8),
        length in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut memory = ReplayMemory::new(None);
        for (i, &l) in lens.iter().enumerate() {
            memory.push(tagged(i, l));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match memory.sample_windows(16, length, &mut rng) {
            Err(_) => prop_assert!(lens.iter().all(|&l| l < length)),
            Ok(windows) => {
                for w in &windows {
                    prop_assert!(w.offset + length <= memory.get(w.episode).unwrap().len());
                }
                let b = memory.batch::<f64>(&windows, length, &[0]).unwrap();
                for t in 0..length {
                    for (k, w) in windows.iter().enumerate() {
                        let row = t * windows.len() + k;
                        let step = w.offset + t;
                        if step == 0 {
                            prop_assert_eq!(b.reward_mask.data[row], 0.0);
                        } else {
                            prop_assert_eq!(b.prev_rewards.data[row], (w.episode * 10_000 + step - 1) as f64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_return_increases_with_rewards(
        rewards in prop::collection::vec(-10.0f64..10.0, 1..16),
        seed in any::<u64>(),
        delta in 1e-3f64..5.0,
        gamma in 0.1f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..=rewards.len()).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let base = lambda_return(&rewards, &values, gamma, lambda).unwrap();
        let bumped: Vec<f64> = rewards.iter().map(|r| r + delta).collect();
        let up = lambda_return(&bumped, &values, gamma, lambda).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(mean(&up) > mean(&base));
    }

    #[test]
    fn policy_actions_stay_in_the_box(
        seed in any::<u64>(),
        scale in 0.1f64..1e3,
        noise in 0.0f64..2.0,
    ) {
        let arch = Architecture::tiny();
        let b = Behavior::<f64>::new(&arch, BehaviorConfig::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::new(vec![8, arch.feature()], (0..8 * arch.feature()).map(|_| rng.gen_range(-scale..scale)).collect());
        for mode in [ActMode::Sample, ActMode::Mode] {
            for a in b.act(&f, mode, noise, &mut rng) {
                prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
                let e = EnvAction::from_policy(a);
                prop_assert!(e.gas >= 0.0 && e.brake >= 0.0);
            }
        }
    }

    #[test]
    fn latent_std_respects_floor(seed in any::<u64>(), scale in 0.1f64..100.0) {
        let arch = Architecture::tiny();
        let m = WorldModel::<f64>::new(ModelConfig { arch: arch.clone(), n_agents: 2, observer: false, beta: 1.0 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |shape: &[usize]| Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.gen_range(-scale..scale)).collect());
        let prev = JointLatent { deter: rand(&[3, 2 * arch.deter]), stoch: rand(&[3, 2 * arch.stoch]), mean: rand(&[3, 2 * arch.stoch]), std: Tensor::full(&[3, 2 * arch.stoch], 1.0) };
        let (post, prior) = m.observe_step(&prev, &rand(&[3, 6]), &rand(&[3, 2 * arch.embed()]), &mut Noise::Mean).unwrap();
        prop_assert!(post.std.data.iter().chain(&prior.std.data).all(|&s| s >= arch.min_std));
    }
}

#[test]
fn per_tile_rewards_take_allowed_values() {
    let config = EnvConfig { episode_length: 400, ..EnvConfig::desk() };
    let n = config.num_tiles as f64;
    for seed in 0..3u64 {
        let (mut state, _) = env::reset(&config, seed).unwrap();
        let mut totals = vec![vec![0.0; state.track.num_tiles()]; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pilots = [env::Autopilot::with_speed(14.0), env::Autopilot::with_speed(12.0)];
        while !state.done() {
            let actions: Vec<EnvAction> = (0..2)
                .map(|i| {
                    let mut a = pilots[i].act(&state, i);
                    a.steer = (a.steer + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0);
                    a
                })
                .collect();
            let out = state.step_mut(&actions).unwrap();
            for (agent, visits) in out.visits.iter().enumerate() {
                for v in visits {
                    totals[agent][v.tile] += env::visit_reward(v.order, state.track.num_tiles()).unwrap();
                }
            }
        }
        let allowed = [0.0, 1000.0 / n, 500.0 / n, 1500.0 / n];
        for agent in &totals {
            for &t in agent {
                assert!(allowed.iter().any(|a| (a - t).abs() < 1e-9), "tile total {t}");
            }
        }
    }
}

#[test]
fn window_sampling_is_uniform() {
    // chi-squared over all (episode, offset) pairs
    let mut memory = ReplayMemory::new(None);
    for (i, l) in [6usize, 9, 4].into_iter().enumerate() {
        memory.push(tagged(i, l));
    }
    let length = 3;
    let cells: Vec<(usize, usize)> = (0..3).flat_map(|e| (0..=memory.get(e).unwrap().len() - length).map(move |o| (e, o))).collect();
    assert_eq!(cells.len(), memory.num_windows(length));
    let mut counts = vec![0usize; cells.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 20_000;
    for w in memory.sample_windows(draws, length, &mut rng).unwrap() {
        counts[cells.iter().position(|&c| c == (w.episode, w.offset)).unwrap()] += 1;
    }
    let expected = draws as f64 / cells.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9% quantile of chi-squared with 12 degrees of freedom
    assert!(chi2 < 32.91, "chi2 {chi2} over {} cells", cells.len());
}
