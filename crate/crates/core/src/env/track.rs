//! Closed-loop track generation.
//!
//! The centerline is a smooth star-shaped curve `r(φ) = R (1 + Σ a_k cos(kφ + p_k))`
//! resampled at equal arc length into exactly `N` tiles. Tile `k` spans
//! centerline points `k` and `k + 1 (mod N)`, so consecutive tiles share an
//! edge and the last tile closes the loop onto the first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvConfig;
use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

const DENSE_SAMPLES: usize = 4096;
const HARMONICS: std::ops::RangeInclusive<usize> = 2..=5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    /// Counter-clockwise order: left_k, right_k, right_{k+1}, left_{k+1}.
    pub corners: [Vec2; 4],
    /// Unit travel direction along the centerline.
    pub direction: Vec2,
    pub bbox_min: Vec2,
    pub bbox_max: Vec2,
}

impl Tile {
    fn new(corners: [Vec2; 4], direction: Vec2) -> Self {
        let mut bbox_min = corners[0];
        let mut bbox_max = corners[0];
        for c in &corners[1..] {
            for d in 0..2 {
                bbox_min[d] = bbox_min[d].min(c[d]);
                bbox_max[d] = bbox_max[d].max(c[d]);
            }
        }
        Self { corners, direction, bbox_min, bbox_max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        if p[0] < self.bbox_min[0] || p[0] > self.bbox_max[0] || p[1] < self.bbox_min[1] || p[1] > self.bbox_max[1] {
            return false;
        }
        let mut pos = false;
        let mut neg = false;
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross > 0.0 {
                pos = true;
            } else if cross < 0.0 {
                neg = true;
            }
            if pos && neg {
                return false;
            }
        }
        true
    }

    pub fn center(&self) -> Vec2 {
        let mut c = [0.0; 2];
        for k in &self.corners {
            c[0] += 0.25 * k[0];
            c[1] += 0.25 * k[1];
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub seed: u64,
    pub tiles: Vec<Tile>,
    /// Centerline points; tile `k` starts at `centerline[k]`.
    pub centerline: Vec<Vec2>,
    pub total_length: f64,
    pub half_width: f64,
}

impl Track {
    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// Indices of every tile containing `p`.
    pub fn tiles_at(&self, p: Vec2) -> impl Iterator<Item = usize> + '_ {
        self.tiles.iter().enumerate().filter(move |(_, t)| t.contains(p)).map(|(i, _)| i)
    }

    pub fn on_track(&self, p: Vec2) -> bool {
        self.tiles.iter().any(|t| t.contains(p))
    }

    /// Nearest centerline vertex to `p` (brute force).
    pub fn nearest_tile(&self, p: Vec2) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centerline.iter().enumerate() {
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Midpoint of tile `k`'s centerline segment.
    pub fn tile_mid(&self, k: usize) -> Vec2 {
        let n = self.centerline.len();
        let a = self.centerline[k % n];
        let b = self.centerline[(k + 1) % n];
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    pub fn heading_at(&self, k: usize) -> f64 {
        let d = self.tiles[k % self.tiles.len()].direction;
        d[1].atan2(d[0])
    }
}

/// Pure function of `(seed, config)`.
pub fn generate_track(seed: u64, config: &EnvConfig) -> Result<Track> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_tiles;
    for _ in 0..config.max_track_attempts {
        let harmonics: Vec<(f64, f64, f64)> = HARMONICS
            .map(|k| {
                let amp = rng.gen_range(0.0..0.3) * config.track_roughness / k as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (k as f64, amp, phase)
            })
            .collect();
        if let Some(track) = build(seed, n, config, &harmonics) {
            return Ok(track);
        }
    }
    Err(Error::TrackGeneration { seed, attempts: config.max_track_attempts })
}

fn build(seed: u64, n: usize, config: &EnvConfig, harmonics: &[(f64, f64, f64)]) -> Option<Track> {
    let radius = |phi: f64| {
        config.track_radius * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum::<f64>())
    };
    let dense: Vec<Vec2> = (0..DENSE_SAMPLES)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / DENSE_SAMPLES as f64;
            let r = radius(phi);
            [r * phi.cos(), r * phi.sin()]
        })
        .collect();
    if dense.iter().any(|p| p[0].hypot(p[1]) < 2.0 * config.track_half_width) {
        return None;
    }
    let mut cumulative = Vec::with_capacity(DENSE_SAMPLES + 1);
    cumulative.push(0.0);
    for i in 0..DENSE_SAMPLES {
        let (a, b) = (dense[i], dense[(i + 1) % DENSE_SAMPLES]);
        cumulative.push(cumulative[i] + (b[0] - a[0]).hypot(b[1] - a[1]));
    }
    let total = cumulative[DENSE_SAMPLES];
    let mut centerline = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let s = total * k as f64 / n as f64;
        while cumulative[j + 1] < s {
            j += 1;
        }
        let t = (s - cumulative[j]) / (cumulative[j + 1] - cumulative[j]);
        let (a, b) = (dense[j], dense[(j + 1) % DENSE_SAMPLES]);
        centerline.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }

    // Reject bends tighter than the track can represent without the inner
    // edge folding over.
    let min_radius = 2.0 * config.track_half_width;
    let seg = total / n as f64;
    for k in 0..n {
        let a = centerline[(k + n - 1) % n];
        let b = centerline[k];
        let c = centerline[(k + 1) % n];
        let h1 = (b[1] - a[1]).atan2(b[0] - a[0]);
        let h2 = (c[1] - b[1]).atan2(c[0] - b[0]);
        let turn = wrap_angle(h2 - h1).abs();
        if turn > 1e-12 && seg / turn < min_radius {
            return None;
        }
    }

    let w = config.track_half_width;
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for k in 0..n {
        let prev = centerline[(k + n - 1) % n];
        let next = centerline[(k + 1) % n];
        let (dx, dy) = (next[0] - prev[0], next[1] - prev[1]);
        let len = dx.hypot(dy);
        let normal = [-dy / len, dx / len];
        let c = centerline[k];
        left.push([c[0] + w * normal[0], c[1] + w * normal[1]]);
        right.push([c[0] - w * normal[0], c[1] - w * normal[1]]);
    }
    let tiles = (0..n)
        .map(|k| {
            let k1 = (k + 1) % n;
            let (a, b) = (centerline[k], centerline[k1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
            Tile::new([left[k], right[k], right[k1], left[k1]], dir)
        })
        .collect();
    Some(Track { seed, tiles, centerline, total_length: total, half_width: w })
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut x = (a + std::f64::consts::PI) % tau;
    if x < 0.0 {
        x += tau;
    }
    x - std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shares_edge(a: &Tile, b: &Tile) -> bool {
        a.corners[2] == b.corners[1] && a.corners[3] == b.corners[0]
    }

    #[test]
    fn track_is_closed_and_deterministic() {
        let cfg = EnvConfig::default();
        let t = generate_track(0, &cfg).unwrap();
        assert_eq!(t, generate_track(0, &cfg).unwrap());
        let n = t.num_tiles();
        assert_eq!(n, cfg.num_tiles);
        assert!(n >= 3);
        for k in 0..n {
            assert!(shares_edge(&t.tiles[k], &t.tiles[(k + 1) % n]), "tile {k}");
        }
    }

    #[test]
    fn different_seeds_give_different_tracks() {
        let cfg = EnvConfig::default();
        let a = serde_json::to_string(&generate_track(0, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_track(1, &cfg).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn impossible_geometry_reports_error() {
        let cfg = EnvConfig { track_radius: 5.0, max_track_attempts: 3, ..EnvConfig::default() };
        match generate_track(7, &cfg) {
            Err(Error::TrackGeneration { attempts: 3, seed: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tile_centers_lie_inside_their_tiles() {
        let t = generate_track(3, &EnvConfig::desk()).unwrap();
        for (k, tile) in t.tiles.iter().enumerate() {
            assert!(tile.contains(tile.center()), "tile {k}");
            assert!(t.on_track(t.tile_mid(k)));
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -std::f64::consts::PI, 0.0, 3.2, std::f64::consts::PI, 25.0] {
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w), "{a} -> {w}");
        }
    }
}
