//! Planar pushing of a disc by a point pusher.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clamp_norm, Reading, HALF_WIDTH, MAX_COMMAND};

pub const DISC_RADIUS: f64 = 0.06;
/// Contact stiffness in N/m.
pub const PUSH_STIFFNESS: f64 = 100.0;
pub const CONTACT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PushWorld {
    pub disc: [f64; 2],
    pub pusher: [f64; 2],
    pub radius: f64,
    pub stiffness: f64,
}

impl PushWorld {
    pub fn new(disc: [f64; 2], pusher: [f64; 2]) -> Self {
        Self {
            disc,
            pusher,
            radius: DISC_RADIUS,
            stiffness: PUSH_STIFFNESS,
        }
    }

    /// Random start: disc near the middle, pusher on a ring around it.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let disc = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)];
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.12..0.22);
        let pusher = [disc[0] + dist * angle.cos(), disc[1] + dist * angle.sin()];
        Self::new(disc, clamp_box(pusher, HALF_WIDTH))
    }

    fn disc_limit(&self) -> f64 {
        HALF_WIDTH - self.radius
    }

    /// Advances the world by one commanded pusher displacement.
    ///
    /// The disc is projected out of the pusher along the contact normal.
    pub fn step(&mut self, u: [f64; 2]) -> Reading {
        let u = clamp_norm(u, MAX_COMMAND);
        self.pusher = clamp_box([self.pusher[0] + u[0], self.pusher[1] + u[1]], HALF_WIDTH);
        let dx = self.disc[0] - self.pusher[0];
        let dy = self.disc[1] - self.pusher[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let depth = self.radius - dist;
        if depth <= 0.0 {
            return Reading::default();
        }
        let normal = if dist > 1e-12 {
            [dx / dist, dy / dist]
        } else {
            let n = (u[0] * u[0] + u[1] * u[1]).sqrt().max(1e-12);
            [u[0] / n, u[1] / n]
        };
        let lim = self.disc_limit();
        self.disc = clamp_box(
            [
                self.disc[0] + normal[0] * depth,
                self.disc[1] + normal[1] * depth,
            ],
            lim,
        );
        // A wall may stop the disc; the pusher is then held on its boundary.
        let gx = self.pusher[0] - self.disc[0];
        let gy = self.pusher[1] - self.disc[1];
        let gap = (gx * gx + gy * gy).sqrt();
        if gap < self.radius - CONTACT_TOLERANCE {
            let (ox, oy) = if gap > 1e-12 {
                (gx / gap, gy / gap)
            } else {
                (-normal[0], -normal[1])
            };
            self.pusher = [
                self.disc[0] + ox * self.radius,
                self.disc[1] + oy * self.radius,
            ];
        }
        let f = self.stiffness * depth;
        Reading {
            force: [-normal[0] * f, -normal[1] * f, 0.0],
            contact: true,
        }
    }
}

pub(crate) fn clamp_box(p: [f64; 2], lim: f64) -> [f64; 2] {
    [p[0].clamp(-lim, lim), p[1].clamp(-lim, lim)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Approach,
    Push,
}

/// Pushes toward the disc center, re-targeting the approach angle periodically.
#[derive(Debug, Clone)]
pub struct PushController {
    pub gain: f64,
    pub speed_cap: f64,
    pub retarget_every: usize,
    phase: Phase,
    staging: [f64; 2],
    steps: usize,
}

impl Default for PushController {
    fn default() -> Self {
        Self {
            gain: 0.1,
            speed_cap: 0.05,
            retarget_every: 50,
            phase: Phase::Approach,
            staging: [0.0, 0.0],
            steps: 0,
        }
    }
}

impl PushController {
    fn retarget(&mut self, world: &PushWorld, rng: &mut ChaCha8Rng) {
        // Push direction points roughly toward the workspace interior.
        let inward = (-world.disc[1]).atan2(-world.disc[0]);
        let spread = if world.disc[0].hypot(world.disc[1]) < 0.1 {
            std::f64::consts::PI
        } else {
            std::f64::consts::FRAC_PI_2
        };
        let heading = inward + rng.random_range(-spread..spread);
        let standoff = world.radius + 0.02;
        self.staging = clamp_box(
            [
                world.disc[0] - standoff * heading.cos(),
                world.disc[1] - standoff * heading.sin(),
            ],
            HALF_WIDTH,
        );
        self.phase = Phase::Approach;
    }

    pub fn command(&mut self, world: &PushWorld, rng: &mut ChaCha8Rng) -> [f64; 2] {
        if self.steps.is_multiple_of(self.retarget_every) {
            self.retarget(world, rng);
        }
        self.steps += 1;
        if self.phase == Phase::Approach {
            let e = [
                self.staging[0] - world.pusher[0],
                self.staging[1] - world.pusher[1],
            ];
            if e[0].hypot(e[1]) > 0.005 {
                return clamp_norm(e, self.speed_cap);
            }
            self.phase = Phase::Push;
        }
        proportional(world, self.gain, self.speed_cap)
    }
}

/// `gain * (disc - pusher)`, capped.
pub fn proportional(world: &PushWorld, gain: f64, cap: f64) -> [f64; 2] {
    clamp_norm(
        [
            gain * (world.disc[0] - world.pusher[0]),
            gain * (world.disc[1] - world.pusher[1]),
        ],
        cap,
    )
}
