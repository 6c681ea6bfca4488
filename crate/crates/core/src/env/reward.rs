use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_PENALTY: f64 = 0.1;
pub const FIRST_VISIT_TOTAL: f64 = 1000.0;
pub const SECOND_VISIT_TOTAL: f64 = 500.0;

/// A tile newly credited to an agent, with its visitation order (1 or 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub tile: usize,
    pub order: u8,
}

/// Tile reward for one visit on an `n_tiles` track.
pub fn visit_reward(order: u8, n_tiles: usize) -> Result<f64> {
    match order {
        1 => Ok(FIRST_VISIT_TOTAL / n_tiles as f64),
        2 => Ok(SECOND_VISIT_TOTAL / n_tiles as f64),
        o => Err(Error::VisitationOrder(o)),
    }
}

/// Per-agent reward for one control step: the time penalty plus the tile
/// rewards in `delta[agent]`.
pub fn compute_rewards(delta: &[Vec<Visit>], n_tiles: usize) -> Result<Vec<f64>> {
    delta
        .iter()
        .enumerate()
        .map(|(agent, visits)| {
            let mut r = -TIME_PENALTY;
            for (i, v) in visits.iter().enumerate() {
                if visits[..i].iter().any(|w| w.tile == v.tile) {
                    return Err(Error::DuplicateCredit { tile: v.tile, agent });
                }
                r += visit_reward(v.order, n_tiles)?;
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_new_tiles_gives_time_penalty() {
        assert_eq!(compute_rewards(&[vec![], vec![]], 100).unwrap(), vec![-0.1, -0.1]);
    }

    #[test]
    fn second_visitor_gets_half() {
        let r = compute_rewards(&[vec![], vec![Visit { tile: 3, order: 2 }]], 100).unwrap();
        assert!((r[1] - 4.9).abs() < 1e-12);
    }

    #[test]
    fn two_first_visits_sum() {
        let single = compute_rewards(&[vec![Visit { tile: 0, order: 1 }]], 100).unwrap()[0] + TIME_PENALTY;
        let r = compute_rewards(&[vec![Visit { tile: 0, order: 1 }, Visit { tile: 1, order: 1 }], vec![]], 100).unwrap();
        assert!((r[0] - (2.0 * single - TIME_PENALTY)).abs() < 1e-12);
        assert!((r[0] - 19.9).abs() < 1e-12);
    }

    #[test]
    fn invalid_order_and_duplicates_error() {
        assert!(matches!(compute_rewards(&[vec![Visit { tile: 0, order: 3 }]], 10), Err(Error::VisitationOrder(3))));
        let dup = vec![Visit { tile: 4, order: 1 }, Visit { tile: 4, order: 1 }];
        assert!(matches!(compute_rewards(&[vec![], dup], 10), Err(Error::DuplicateCredit { tile: 4, agent: 1 })));
    }
}
