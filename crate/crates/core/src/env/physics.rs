//! Planar four-wheel car with friction-circle tire forces and impulse-based
//! car-car contacts.

use serde::{Deserialize, Serialize};

use super::track::{wrap_angle, Track, Vec2};
use super::EnvAction;

pub const CAR_LENGTH: f64 = 4.0;
pub const CAR_WIDTH: f64 = 2.0;
const MASS: f64 = 1000.0;
const INERTIA: f64 = MASS * (CAR_LENGTH * CAR_LENGTH + CAR_WIDTH * CAR_WIDTH) / 12.0;
const GRAVITY: f64 = 9.81;
/// Body-frame wheel offsets (x forward, y left): FL, FR, RL, RR.
pub const WHEEL_OFFSETS: [Vec2; 4] = [[1.3, 0.8], [1.3, -0.8], [-1.3, 0.8], [-1.3, -0.8]];
const MAX_STEER: f64 = 0.45;
const STEER_RATE: f64 = 3.0;
/// Per driven wheel, W.
const ENGINE_POWER: f64 = 40_000.0;
/// Equivalent wheel mass mapping tire force to rim-speed change, kg.
const WHEEL_INERTIA: f64 = 120.0;
const TIRE_STIFFNESS: f64 = 6_000.0;
const BRAKE_DECEL: f64 = 50.0;
const ROLLING_DECEL: f64 = 0.3;
const DRAG: f64 = 1.0;
/// Cars collide as two discs along the body axis.
const DISC_OFFSET: f64 = 1.0;
const DISC_RADIUS: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WheelState {
    /// Rim speed, m/s.
    pub omega: f64,
    /// Steering angle relative to the body (front wheels only).
    pub steer: f64,
    pub slipping: bool,
    pub on_grass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub position: Vec2,
    /// Radians in `[-π, π)`; 0 points along +x.
    pub heading: f64,
    pub velocity: Vec2,
    pub angular_velocity: f64,
    pub wheels: [WheelState; 4],
    pub color: [u8; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct Friction {
    pub road: f64,
    pub grass_factor: f64,
}

pub fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl CarState {
    pub fn new(position: Vec2, heading: f64, color: [u8; 3]) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            velocity: [0.0, 0.0],
            angular_velocity: 0.0,
            wheels: [WheelState::default(); 4],
            color,
        }
    }

    pub fn forward(&self) -> Vec2 {
        [self.heading.cos(), self.heading.sin()]
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn wheel_position(&self, i: usize) -> Vec2 {
        let r = rotate(WHEEL_OFFSETS[i], self.heading);
        [self.position[0] + r[0], self.position[1] + r[1]]
    }

    /// Velocity of a body point given its world-frame offset from the center.
    fn point_velocity(&self, r: Vec2) -> Vec2 {
        [
            self.velocity[0] - self.angular_velocity * r[1],
            self.velocity[1] + self.angular_velocity * r[0],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.velocity).all(|v| v.is_finite())
            && self.heading.is_finite()
            && self.angular_velocity.is_finite()
            && self.wheels.iter().all(|w| w.omega.is_finite() && w.steer.is_finite())
    }

    /// Commanded longitudinal and lateral tire forces before friction
    /// limiting, for inspection in tests.
    pub fn tire_forces(&self, action: &EnvAction, friction: Friction, track: &Track, dt: f64) -> [Vec2; 4] {
        let mut probe = self.clone();
        probe.integrate_wheels(action, friction, track, dt).1
    }

    fn integrate_wheels(&mut self, action: &EnvAction, friction: Friction, track: &Track, dt: f64) -> ((Vec2, f64), [Vec2; 4]) {
        let a = action.clamped();
        let target = -a.steer * MAX_STEER;
        let mut force = [0.0; 2];
        let mut torque = 0.0;
        let mut applied = [[0.0; 2]; 4];
        let normal_load = MASS * GRAVITY / 4.0;
        for i in 0..4 {
            let front = i < 2;
            let w = &mut self.wheels[i];
            if front {
                let delta = (target - w.steer).clamp(-STEER_RATE * dt, STEER_RATE * dt);
                w.steer += delta;
            } else {
                w.omega += a.gas * ENGINE_POWER / (WHEEL_INERTIA * (w.omega.abs() + 5.0)) * dt;
            }
            if a.brake >= 0.9 {
                w.omega = 0.0;
            } else {
                let dec = (BRAKE_DECEL * a.brake + ROLLING_DECEL) * dt;
                w.omega = if w.omega.abs() <= dec { 0.0 } else { w.omega - dec * w.omega.signum() };
            }
            let r = rotate(WHEEL_OFFSETS[i], self.heading);
            let pos = [self.position[0] + r[0], self.position[1] + r[1]];
            let on_track = track.on_track(pos);
            let mu = if on_track { friction.road } else { friction.road * friction.grass_factor };
            let phi = self.heading + if front { self.wheels[i].steer } else { 0.0 };
            let fwd = [phi.cos(), phi.sin()];
            let side = [-phi.sin(), phi.cos()];
            let v = {
                let va = self.velocity;
                [va[0] - self.angular_velocity * r[1], va[1] + self.angular_velocity * r[0]]
            };
            let vf = dot(v, fwd);
            let vs = dot(v, side);
            let w = &mut self.wheels[i];
            let mut f_long = (w.omega - vf) * TIRE_STIFFNESS;
            let mut f_lat = -vs * TIRE_STIFFNESS;
            let limit = mu * normal_load;
            let mag = f_long.hypot(f_lat);
            w.slipping = mag > limit;
            w.on_grass = !on_track;
            if w.slipping {
                f_long *= limit / mag;
                f_lat *= limit / mag;
            }
            w.omega -= f_long * dt / WHEEL_INERTIA;
            applied[i] = [f_long, f_lat];
            let fw = [fwd[0] * f_long + side[0] * f_lat, fwd[1] * f_long + side[1] * f_lat];
            force[0] += fw[0];
            force[1] += fw[1];
            torque += cross(r, fw);
        }
        ((force, torque), applied)
    }

    /// Advances the car by `dt` under `action`, ignoring other cars.
    pub fn advance(&mut self, action: &EnvAction, friction: Friction, track: &Track, dt: f64) {
        let ((mut force, torque), _) = self.integrate_wheels(action, friction, track, dt);
        let speed = self.speed();
        force[0] -= DRAG * speed * self.velocity[0];
        force[1] -= DRAG * speed * self.velocity[1];
        self.velocity[0] += force[0] / MASS * dt;
        self.velocity[1] += force[1] / MASS * dt;
        self.angular_velocity += torque / INERTIA * dt;
        self.position[0] += self.velocity[0] * dt;
        self.position[1] += self.velocity[1] * dt;
        self.heading = wrap_angle(self.heading + self.angular_velocity * dt);
    }

    fn discs(&self) -> [Vec2; 2] {
        let f = self.forward();
        [
            [self.position[0] + DISC_OFFSET * f[0], self.position[1] + DISC_OFFSET * f[1]],
            [self.position[0] - DISC_OFFSET * f[0], self.position[1] - DISC_OFFSET * f[1]],
        ]
    }

    fn apply_impulse(&mut self, impulse: Vec2, r: Vec2) {
        self.velocity[0] += impulse[0] / MASS;
        self.velocity[1] += impulse[1] / MASS;
        self.angular_velocity += cross(r, impulse) / INERTIA;
    }
}

/// One resolved contact: impulses applied to each car (equal and opposite).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    pub impulse_on_a: Vec2,
    pub impulse_on_b: Vec2,
    pub point: Vec2,
}

/// Resolves disc-disc overlaps between two cars with zero restitution and
/// splits the positional correction evenly.
pub fn resolve_collision(a: &mut CarState, b: &mut CarState) -> Vec<Contact> {
    let mut contacts = Vec::new();
    for da in 0..2 {
        for db in 0..2 {
            let ca = a.discs()[da];
            let cb = b.discs()[db];
            let d = [cb[0] - ca[0], cb[1] - ca[1]];
            let dist = d[0].hypot(d[1]);
            let overlap = 2.0 * DISC_RADIUS - dist;
            if overlap <= 0.0 || dist < 1e-12 {
                continue;
            }
            let n = [d[0] / dist, d[1] / dist];
            let point = [0.5 * (ca[0] + cb[0]), 0.5 * (ca[1] + cb[1])];
            let ra = [point[0] - a.position[0], point[1] - a.position[1]];
            let rb = [point[0] - b.position[0], point[1] - b.position[1]];
            let va = a.point_velocity(ra);
            let vb = b.point_velocity(rb);
            let vn = dot([vb[0] - va[0], vb[1] - va[1]], n);
            if vn < 0.0 {
                let (rna, rnb) = (cross(ra, n), cross(rb, n));
                let denom = 2.0 / MASS + (rna * rna + rnb * rnb) / INERTIA;
                let j = -vn / denom;
                let on_b = [j * n[0], j * n[1]];
                let on_a = [-on_b[0], -on_b[1]];
                a.apply_impulse(on_a, ra);
                b.apply_impulse(on_b, rb);
                contacts.push(Contact { impulse_on_a: on_a, impulse_on_b: on_b, point });
            }
            let push = 0.5 * overlap;
            a.position[0] -= push * n[0];
            a.position[1] -= push * n[1];
            b.position[0] += push * n[0];
            b.position[1] += push * n[1];
        }
    }
    contacts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_track, EnvConfig};

    fn setup() -> (Track, Friction) {
        let cfg = EnvConfig::desk();
        (generate_track(0, &cfg).unwrap(), Friction { road: cfg.road_friction, grass_factor: cfg.grass_friction_factor })
    }

    fn car_on_track(track: &Track) -> CarState {
        CarState::new(track.tile_mid(0), track.heading_at(0), [200, 0, 0])
    }

    #[test]
    fn gas_accelerates_forward() {
        let (track, fr) = setup();
        let mut car = car_on_track(&track);
        let act = EnvAction::new(0.0, 1.0, 0.0);
        for _ in 0..100 {
            car.advance(&act, fr, &track, 0.02);
        }
        let v = dot(car.velocity, car.forward());
        assert!(v > 5.0, "speed {v}");
    }

    #[test]
    fn hard_braking_stops_the_car() {
        let (track, fr) = setup();
        let mut car = car_on_track(&track);
        for _ in 0..100 {
            car.advance(&EnvAction::new(0.0, 1.0, 0.0), fr, &track, 0.02);
        }
        for _ in 0..200 {
            car.advance(&EnvAction::new(0.0, 0.0, 1.0), fr, &track, 0.02);
        }
        assert!(car.speed() < 0.5, "speed {}", car.speed());
    }

    #[test]
    fn grass_friction_limits_are_lower() {
        let cfg = EnvConfig::default();
        assert!(cfg.road_friction * cfg.grass_friction_factor < cfg.road_friction);
        let (track, fr) = setup();
        // Full throttle from rest: the drive force saturates at the friction limit.
        let mut on = car_on_track(&track);
        let mut off = CarState::new([1e4, 1e4], 0.0, [0, 0, 200]);
        let act = EnvAction::new(0.0, 1.0, 0.0);
        for _ in 0..5 {
            on.advance(&act, fr, &track, 0.02);
            off.advance(&act, fr, &track, 0.02);
        }
        assert!(off.wheels[2].on_grass && !on.wheels[2].on_grass);
        assert!(off.speed() < on.speed());
    }

    #[test]
    fn out_of_range_actions_match_clamped_forces() {
        let (track, fr) = setup();
        let mut car = car_on_track(&track);
        car.velocity = [3.0, 1.0];
        let wild = EnvAction::new(-7.0, 4.0, 2.5);
        let clamped = wild.clamped();
        assert_eq!(car.tire_forces(&wild, fr, &track, 0.02), car.tire_forces(&clamped, fr, &track, 0.02));
    }

    #[test]
    fn collision_impulses_are_equal_and_opposite() {
        let mut a = CarState::new([0.0, 0.0], 0.0, [255, 0, 0]);
        let mut b = CarState::new([1.5, 0.6], 0.3, [0, 0, 255]);
        a.velocity = [5.0, 0.5];
        b.velocity = [-2.0, 0.0];
        b.angular_velocity = 0.4;
        let p_before = [a.velocity[0] + b.velocity[0], a.velocity[1] + b.velocity[1]];
        let contacts = resolve_collision(&mut a, &mut b);
        assert!(!contacts.is_empty());
        for c in &contacts {
            assert!((c.impulse_on_a[0] + c.impulse_on_b[0]).abs() <= 1e-9);
            assert!((c.impulse_on_a[1] + c.impulse_on_b[1]).abs() <= 1e-9);
        }
        let p_after = [a.velocity[0] + b.velocity[0], a.velocity[1] + b.velocity[1]];
        assert!((p_before[0] - p_after[0]).abs() < 1e-9 && (p_before[1] - p_after[1]).abs() < 1e-9);
    }
}
