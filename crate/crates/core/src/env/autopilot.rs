//! Ground-truth pure-pursuit controller for scripted opponents and tests.

use serde::{Deserialize, Serialize};

use super::track::wrap_angle;
use super::{EnvAction, EnvState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autopilot {
    /// m/s
    pub target_speed: f64,
    /// Signed lateral offset from the centerline as a fraction of the
    /// half-width; positive is left of the travel direction.
    pub lane_offset: f64,
    /// Look-ahead in tiles.
    pub lookahead: usize,
    pub steer_gain: f64,
}

impl Default for Autopilot {
    fn default() -> Self {
        Self { target_speed: 12.0, lane_offset: 0.0, lookahead: 3, steer_gain: 2.0 }
    }
}

impl Autopilot {
    pub fn with_speed(target_speed: f64) -> Self {
        Self { target_speed, ..Self::default() }
    }

    pub fn act(&self, state: &EnvState, agent: usize) -> EnvAction {
        let car = &state.cars[agent];
        let track = &state.track;
        let n = track.num_tiles();
        let seg = track.total_length / n as f64;
        let ahead = self.lookahead.max((car.speed() * 0.4 / seg).ceil() as usize).max(1);
        let k = (track.nearest_tile(car.position) + ahead) % n;
        let mid = track.tile_mid(k);
        let h = track.heading_at(k);
        let off = self.lane_offset * track.half_width;
        let target = [mid[0] - off * h.sin(), mid[1] + off * h.cos()];
        let bearing = (target[1] - car.position[1]).atan2(target[0] - car.position[0]);
        let alpha = wrap_angle(bearing - car.heading);
        let steer = (-self.steer_gain * alpha).clamp(-1.0, 1.0);
        let fwd = car.velocity[0] * car.heading.cos() + car.velocity[1] * car.heading.sin();
        let err = self.target_speed - fwd;
        let (gas, brake) = if err > 0.0 { ((0.5 * err).min(1.0), 0.0) } else { (0.0, (-0.1 * err).min(0.8)) };
        EnvAction::new(steer, gas, brake)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, EnvConfig};

    #[test]
    fn autopilot_completes_a_solo_lap() {
        let cfg = EnvConfig { num_cars: 1, episode_length: 2000, ..EnvConfig::desk() };
        let (mut s, _) = reset(&cfg, 3).unwrap();
        let pilot = Autopilot::default();
        let mut total = 0.0;
        while !s.done() {
            let a = pilot.act(&s, 0);
            total += s.step_mut(&[a]).unwrap().tile_rewards[0];
        }
        assert!(s.tile_ledger.all_visited(), "visited {}/{} in {} steps", s.tile_ledger.visited_count(0), cfg.num_tiles, s.step_count);
        assert!((total - 1000.0).abs() < 1e-9, "{total}");
    }
}
