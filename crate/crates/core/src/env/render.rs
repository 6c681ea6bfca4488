//! Ego-centered top-down rendering: the ego car points up, sits at
//! `view_ego_row` of the image height and is centered horizontally. A
//! dashboard strip at the bottom shows speed and steering.

use super::physics::{CarState, CAR_LENGTH, CAR_WIDTH};
use super::track::Vec2;
use super::{EnvState, Observation};

const GRASS: [[u8; 3]; 2] = [[102, 204, 102], [102, 230, 102]];
const GRASS_CHECKER_M: f64 = 10.0;
const ROAD_BASE: u8 = 102;
const DASH_BG: [u8; 3] = [0, 0, 0];
const SPEED_BAR: [u8; 3] = [255, 255, 255];
const STEER_BAR: [u8; 3] = [0, 255, 0];
const MAX_DASH_SPEED: f64 = 30.0;
/// Front part of the car body drawn darker, m.
const NOSE_LENGTH: f64 = 1.0;

/// World position at the center of pixel `(row, col)` of `ego`'s view.
pub fn view_to_world(ego: &CarState, size: usize, view_width_m: f64, view_ego_row: f64, row: f64, col: f64) -> Vec2 {
    let mpp = view_width_m / size as f64;
    let fwd_m = (view_ego_row * size as f64 - (row + 0.5)) * mpp;
    let left_m = (size as f64 / 2.0 - (col + 0.5)) * mpp;
    let (s, c) = ego.heading.sin_cos();
    [ego.position[0] + fwd_m * c - left_m * s, ego.position[1] + fwd_m * s + left_m * c]
}

fn dash_rows(size: usize) -> usize {
    (size / 8).max(1)
}

/// Whether any part of `other` can appear in the world area of `ego`'s view.
pub fn car_in_view(state: &EnvState, ego: usize, other: usize) -> bool {
    let cfg = &state.config;
    let size = cfg.image_size;
    let world_rows = size - dash_rows(size);
    let corners = [
        view_to_world(&state.cars[ego], size, cfg.view_width_m, cfg.view_ego_row, 0.0, 0.0),
        view_to_world(&state.cars[ego], size, cfg.view_width_m, cfg.view_ego_row, world_rows as f64, size as f64),
    ];
    let center = [(corners[0][0] + corners[1][0]) / 2.0, (corners[0][1] + corners[1][1]) / 2.0];
    let half_diag = (corners[0][0] - corners[1][0]).hypot(corners[0][1] - corners[1][1]) / 2.0;
    let p = state.cars[other].position;
    let reach = half_diag + CAR_LENGTH.hypot(CAR_WIDTH) / 2.0;
    (p[0] - center[0]).hypot(p[1] - center[1]) <= reach
}

fn car_pixel(car: &CarState, p: Vec2) -> Option<[u8; 3]> {
    let d = [p[0] - car.position[0], p[1] - car.position[1]];
    let (s, c) = car.heading.sin_cos();
    let x = d[0] * c + d[1] * s;
    let y = -d[0] * s + d[1] * c;
    if x.abs() > CAR_LENGTH / 2.0 || y.abs() > CAR_WIDTH / 2.0 {
        return None;
    }
    if x > CAR_LENGTH / 2.0 - NOSE_LENGTH {
        Some(car.color.map(|v| v / 2))
    } else {
        Some(car.color)
    }
}

/// Renders agent `ego`'s observation; a pure function of `state`.
pub fn render_ego_view(state: &EnvState, ego: usize) -> Observation {
    let cfg = &state.config;
    let size = cfg.image_size;
    let car = &state.cars[ego];
    let mut obs = Observation::blank(size);
    let dash = dash_rows(size);
    let world_rows = size - dash;

    // Only tiles whose bounding boxes meet the view can cover a pixel.
    let view_radius = cfg.view_width_m * 2f64.sqrt();
    let nearby: Vec<usize> = state
        .track
        .tiles
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let dx = (car.position[0] - car.position[0].clamp(t.bbox_min[0], t.bbox_max[0])).abs();
            let dy = (car.position[1] - car.position[1].clamp(t.bbox_min[1], t.bbox_max[1])).abs();
            dx.hypot(dy) <= view_radius
        })
        .map(|(i, _)| i)
        .collect();
    let others: Vec<usize> = (0..state.cars.len()).filter(|&i| i != ego && car_in_view(state, ego, i)).collect();

    let mut last_tile: Option<usize> = None;
    for row in 0..world_rows {
        for col in 0..size {
            let p = view_to_world(car, size, cfg.view_width_m, cfg.view_ego_row, row as f64, col as f64);
            let mut color = None;
            if let Some(c) = car_pixel(car, p) {
                color = Some(c);
            }
            if color.is_none() {
                color = others.iter().find_map(|&o| car_pixel(&state.cars[o], p));
            }
            let color = color.unwrap_or_else(|| {
                let hit = match last_tile {
                    Some(k) if state.track.tiles[k].contains(p) => Some(k),
                    _ => nearby.iter().copied().find(|&k| state.track.tiles[k].contains(p)),
                };
                last_tile = hit.or(last_tile);
                match hit {
                    Some(k) => [ROAD_BASE + 4 * (k % 3) as u8; 3],
                    None => {
                        let cx = (p[0] / GRASS_CHECKER_M).floor() as i64;
                        let cy = (p[1] / GRASS_CHECKER_M).floor() as i64;
                        GRASS[((cx + cy).rem_euclid(2)) as usize]
                    }
                }
            });
            let i = (row * size + col) * 3;
            obs.pixels[i..i + 3].copy_from_slice(&color);
        }
    }

    let speed_frac = (car.speed() / MAX_DASH_SPEED).min(1.0);
    let steer = car.wheels[0].steer / 0.45;
    let half = size / 2;
    for row in world_rows..size {
        for col in 0..size {
            let mut color = DASH_BG;
            if col < half && (col as f64) < speed_frac * half as f64 {
                color = SPEED_BAR;
            }
            if col >= half {
                let x = (col - half) as f64 / half as f64 * 2.0 - 1.0;
                let inside = if steer >= 0.0 { x >= 0.0 && x < steer } else { x < 0.0 && x >= steer };
                if inside {
                    color = STEER_BAR;
                }
            }
            let i = (row * size + col) * 3;
            obs.pixels[i..i + 3].copy_from_slice(&color);
        }
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, EnvConfig};

    fn count_color(obs: &Observation, c: [u8; 3]) -> usize {
        (0..obs.size * obs.size).filter(|&i| obs.pixels[i * 3..i * 3 + 3] == c).count()
    }

    #[test]
    fn default_view_shape_and_purity() {
        let (s, _) = reset(&EnvConfig::default(), 0).unwrap();
        let a = render_ego_view(&s, 0);
        assert_eq!(a.pixels.len(), 96 * 96 * 3);
        assert_eq!(a, render_ego_view(&s, 0));
    }

    #[test]
    fn far_opponent_is_absent_and_near_one_is_visible() {
        let (mut s, _) = reset(&EnvConfig::desk(), 0).unwrap();
        let opp_color = s.cars[1].color;
        let near = render_ego_view(&s, 0);
        assert!(count_color(&near, opp_color) > 0);
        s.cars[1].position = [s.cars[0].position[0] + 1000.0, s.cars[0].position[1]];
        assert!(!car_in_view(&s, 0, 1));
        assert_eq!(count_color(&render_ego_view(&s, 0), opp_color), 0);
    }

    #[test]
    fn ego_car_sits_at_configured_row() {
        let cfg = EnvConfig::desk();
        let (s, _) = reset(&cfg, 0).unwrap();
        let obs = render_ego_view(&s, 0);
        let row = (cfg.view_ego_row * cfg.image_size as f64) as usize;
        let col = cfg.image_size / 2;
        let px = obs.pixel(row, col);
        let c = s.cars[0].color;
        assert!(px == c || px == c.map(|v| v / 2), "{px:?} vs {c:?}");
    }
}
