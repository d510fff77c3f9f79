//! A hinged door pushed or pulled by a point end-effector.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::push::clamp_box;
use super::{clamp_norm, Reading, HALF_WIDTH, MAX_COMMAND};

pub const DOOR_LENGTH: f64 = 0.3;
pub const HANDLE_RADIUS: f64 = 0.25;
pub const DOOR_STIFFNESS: f64 = 100.0;
pub const ANGLE_LIMIT: f64 = FRAC_PI_2;
const ON_LINE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DoorWorld {
    pub hinge: [f64; 2],
    pub theta: f64,
    pub length: f64,
    pub grasped: bool,
    pub pusher: [f64; 2],
    pub handle_radius: f64,
    pub stiffness: f64,
    /// Which side of the door line the pusher last approached from (+1 or -1).
    side: f64,
}

fn dir(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn normal(theta: f64) -> [f64; 2] {
    [-theta.sin(), theta.cos()]
}

impl DoorWorld {
    pub fn new(hinge: [f64; 2], theta: f64, grasped: bool, pusher: [f64; 2]) -> Self {
        let mut w = Self {
            hinge,
            theta: theta.clamp(-ANGLE_LIMIT, ANGLE_LIMIT),
            length: DOOR_LENGTH,
            grasped,
            pusher,
            handle_radius: HANDLE_RADIUS,
            stiffness: DOOR_STIFFNESS,
            side: 1.0,
        };
        if grasped {
            w.pusher = w.handle();
        }
        let s = w.side_of(w.pusher);
        if s.abs() > ON_LINE {
            w.side = s.signum();
        }
        w
    }

    pub fn random(rng: &mut ChaCha8Rng, grasped: bool) -> Self {
        let hinge = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let theta = rng.random_range(-1.0..1.0);
        let arm = rng.random_range(0.1..0.28);
        let off = if rng.random_bool(0.5) { 0.08 } else { -0.08 };
        let (d, n) = (dir(theta), normal(theta));
        let pusher = [
            hinge[0] + arm * d[0] + off * n[0],
            hinge[1] + arm * d[1] + off * n[1],
        ];
        Self::new(hinge, theta, grasped, clamp_box(pusher, HALF_WIDTH))
    }

    pub fn handle(&self) -> [f64; 2] {
        let d = dir(self.theta);
        [
            self.hinge[0] + self.handle_radius * d[0],
            self.hinge[1] + self.handle_radius * d[1],
        ]
    }

    pub fn tip(&self) -> [f64; 2] {
        let d = dir(self.theta);
        [
            self.hinge[0] + self.length * d[0],
            self.hinge[1] + self.length * d[1],
        ]
    }

    /// Signed distance of `p` from the door line (positive on the normal side).
    pub fn side_of(&self, p: [f64; 2]) -> f64 {
        let n = normal(self.theta);
        n[0] * (p[0] - self.hinge[0]) + n[1] * (p[1] - self.hinge[1])
    }

    fn arm_of(&self, p: [f64; 2]) -> f64 {
        let d = dir(self.theta);
        d[0] * (p[0] - self.hinge[0]) + d[1] * (p[1] - self.hinge[1])
    }

    pub fn step(&mut self, u: [f64; 2]) -> Reading {
        let u = clamp_norm(u, MAX_COMMAND);
        if self.grasped {
            self.step_grasped(u)
        } else {
            self.step_free(u)
        }
    }

    fn step_grasped(&mut self, u: [f64; 2]) -> Reading {
        let t = normal(self.theta);
        let s = u[0] * t[0] + u[1] * t[1];
        let target = self.theta + s / self.handle_radius;
        self.theta = target.clamp(-ANGLE_LIMIT, ANGLE_LIMIT);
        let commanded = [self.pusher[0] + u[0], self.pusher[1] + u[1]];
        self.pusher = self.handle();
        let k = self.stiffness;
        let residual = (target - self.theta) * self.handle_radius;
        Reading {
            force: [
                -k * (commanded[0] - self.pusher[0]),
                -k * (commanded[1] - self.pusher[1]),
                -k * residual * self.handle_radius,
            ],
            contact: true,
        }
    }

    fn step_free(&mut self, u: [f64; 2]) -> Reading {
        let before = self.side_of(self.pusher);
        if before.abs() > ON_LINE {
            self.side = before.signum();
        }
        let next = clamp_box([self.pusher[0] + u[0], self.pusher[1] + u[1]], HALF_WIDTH);
        let after = self.side_of(next);
        let crossed = after * self.side <= ON_LINE;
        let arm_next = self.arm_of(next);
        let reach = (next[0] - self.hinge[0]).hypot(next[1] - self.hinge[1]);
        let on_door = arm_next > 0.0 && reach <= self.length && {
            // The crossing point must lie on the segment as well.
            let arm_before = self.arm_of(self.pusher);
            let w = if (before - after).abs() > 1e-15 {
                before / (before - after)
            } else {
                1.0
            };
            let arm_cross = arm_before + w.clamp(0.0, 1.0) * (arm_next - arm_before);
            (0.0..=self.length).contains(&arm_cross)
        };
        if !(crossed && on_door) {
            self.pusher = next;
            return Reading::default();
        }
        let depth = after.abs();
        let old = self.theta;
        let wanted = (next[1] - self.hinge[1]).atan2(next[0] - self.hinge[0]);
        self.theta = wanted.clamp(-ANGLE_LIMIT, ANGLE_LIMIT);
        self.pusher = if self.theta == wanted {
            next
        } else {
            // Blocked at the joint limit: the pusher stays on the door line.
            let d = dir(self.theta);
            [self.hinge[0] + reach * d[0], self.hinge[1] + reach * d[1]]
        };
        let n = normal(self.theta);
        let f = self.stiffness * depth;
        let turn = (self.theta - old).signum();
        Reading {
            force: [
                self.side * n[0] * f,
                self.side * n[1] * f,
                -turn * f * reach,
            ],
            contact: true,
        }
    }
}

/// Random push and pull directions, resampled periodically.
#[derive(Debug, Clone)]
pub struct DoorController {
    pub speed: f64,
    pub speed_cap: f64,
    pub resample_every: usize,
    sign: f64,
    arm: f64,
    staging: Option<[f64; 2]>,
    steps: usize,
}

impl Default for DoorController {
    fn default() -> Self {
        Self {
            speed: 0.003,
            speed_cap: 0.05,
            resample_every: 100,
            sign: 1.0,
            arm: 0.2,
            staging: None,
            steps: 0,
        }
    }
}

impl DoorController {
    pub fn command(&mut self, world: &DoorWorld, rng: &mut ChaCha8Rng) -> [f64; 2] {
        if self.steps.is_multiple_of(self.resample_every) {
            self.sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            self.arm = rng.random_range(0.12..0.28);
            if !world.grasped {
                let (d, n) = (dir(world.theta), normal(world.theta));
                let off = 0.05 * self.sign;
                self.staging = Some(clamp_box(
                    [
                        world.hinge[0] + self.arm * d[0] + off * n[0],
                        world.hinge[1] + self.arm * d[1] + off * n[1],
                    ],
                    HALF_WIDTH,
                ));
            }
        }
        self.steps += 1;
        if let Some(s) = self.staging {
            let e = [s[0] - world.pusher[0], s[1] - world.pusher[1]];
            if e[0].hypot(e[1]) > 0.005 {
                return clamp_norm(e, self.speed_cap);
            }
            self.staging = None;
        }
        let n = normal(world.theta);
        // Grasped: move tangentially; free: push through the door from the staging side.
        let s = if world.grasped { self.sign } else { -self.sign };
        let jitter = 0.3 * self.speed;
        let j: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        clamp_norm(
            [
                s * self.speed * n[0] + jitter * j[0],
                s * self.speed * n[1] + jitter * j[1],
            ],
            self.speed_cap,
        )
    }
}
