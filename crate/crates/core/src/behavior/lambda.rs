//! λ-returns over an imagined horizon, evaluated by the backward recursion
//! `V(τ) = r_τ + γ((1 - λ) v_{τ+1} + λ V(τ+1))` with `V(H) = v_H`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Returns `V_λ(s_τ)` for `τ = 0..H` given `H` rewards and `H + 1` values.
pub fn lambda_return(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check(rewards.len(), values.len(), gamma, lambda)?;
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph version over per-step `[N, 1]` nodes; returns one node per `τ < H`.
pub fn lambda_return_vars<T: Scalar>(
    g: &mut Graph<T>,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    check(rewards.len(), values.len(), gamma, lambda)?;
    let h = rewards.len();
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let boot = g.scale(values[t + 1], T::c(1.0 - lambda));
        let carry = g.scale(next, T::c(lambda));
        let mix = g.add(boot, carry);
        let disc = g.scale(mix, T::c(gamma));
        next = g.add(rewards[t], disc);
        out[t] = next;
    }
    Ok(out)
}

fn check(n_rewards: usize, n_values: usize, gamma: f64, lambda: f64) -> Result<()> {
    if n_values != n_rewards + 1 {
        return Err(Error::Length(format!("{n_rewards} rewards need {} values, got {n_values}", n_rewards + 1)));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("gamma {gamma} and lambda {lambda} must lie in [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn lambda_one_sums_rewards() {
        let v = lambda_return(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(v[0], 3.0);
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let v = lambda_return(&[2.0, 0.0], &[0.0, 10.0, 0.0], 0.99, 0.0).unwrap();
        assert!((v[0] - 11.9).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(lambda_return(&[1.0], &[1.0], 0.9, 0.9), Err(Error::Length(_))));
    }

    #[test]
    fn graph_matches_host() {
        let r = [0.5, -1.0, 2.0];
        let v = [1.0, 2.0, 3.0, 4.0];
        let want = lambda_return(&r, &v, 0.9, 0.7).unwrap();
        let mut g = Graph::<f64>::new();
        let rv: Vec<Var> = r.iter().map(|&x| g.constant(Tensor::new(vec![1, 1], vec![x]))).collect();
        let vv: Vec<Var> = v.iter().map(|&x| g.constant(Tensor::new(vec![1, 1], vec![x]))).collect();
        let got = lambda_return_vars(&mut g, &rv, &vv, 0.9, 0.7).unwrap();
        for (a, b) in got.iter().zip(want) {
            assert!((g.scalar(*a) - b).abs() < 1e-12);
        }
    }
}
