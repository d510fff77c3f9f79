//! Toy manipulation worlds that emit image, force and proprioception streams.

mod dataset;
pub mod door;
pub mod push;
pub mod render;

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use dataset::{DatasetHeader, DatasetStats, Trajectory, TrajectoryDataset};
pub use door::{DoorController, DoorWorld};
pub use push::{PushController, PushWorld};
pub use render::{render, Shape, IMAGE_PIXELS, IMAGE_SIZE};

use crate::error::{FilterError, Result};
use crate::parallel::map_indexed;

/// Half-width of the square workspace, in meters.
pub const HALF_WIDTH: f64 = 0.5;
/// Largest accepted pusher displacement per step.
pub const MAX_COMMAND: f64 = 0.1;
pub const DT: f64 = 0.1;

pub const FORCE_DIM: usize = 3;
pub const PROPRIO_DIM: usize = 2;
pub const OBS_DIM: usize = IMAGE_PIXELS + FORCE_DIM + PROPRIO_DIM;
/// Commanded displacement followed by the pusher position it was issued from.
pub const CONTROL_DIM: usize = 4;
pub const FLAG_DIM: usize = 2;

pub const FORCE_SCALE: f64 = 1.0;
pub const TORQUE_SCALE: f64 = 0.1;
pub const COMMAND_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Push,
    Door,
}

impl Task {
    pub fn id(self) -> u32 {
        match self {
            Task::Push => 0,
            Task::Door => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Task> {
        match id {
            0 => Some(Task::Push),
            1 => Some(Task::Door),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Push => "push",
            Task::Door => "door",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Task::Push => 2,
            Task::Door => 3,
        }
    }

    /// Divisors mapping physical state to normalized network units.
    pub fn state_scale(self) -> &'static [f64] {
        match self {
            Task::Push => &[HALF_WIDTH, HALF_WIDTH],
            Task::Door => &[HALF_WIDTH, HALF_WIDTH, FRAC_PI_2],
        }
    }

    /// Index of the angular state component, if any.
    pub fn angle_dim(self) -> Option<usize> {
        match self {
            Task::Push => None,
            Task::Door => Some(2),
        }
    }

    pub fn normalize_state(self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_scale())
            .map(|(v, s)| v / s)
            .collect()
    }

    pub fn denormalize_state(self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_scale())
            .map(|(v, s)| v * s)
            .collect()
    }
}

impl std::str::FromStr for Task {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "push" => Ok(Task::Push),
            "door" => Ok(Task::Door),
            other => Err(FilterError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Force/torque sensed during one transition.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Reading {
    pub force: [f64; 3],
    pub contact: bool,
}

/// One timestep of sensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalObservation {
    /// Row-major 32x32 grayscale in `[0, 1]`.
    pub image: Vec<f32>,
    /// `(fx, fy, tau_z)`.
    pub force: [f64; 3],
    pub contact: bool,
    /// End-effector position.
    pub proprio: [f64; 2],
    pub blackout: bool,
}

pub(crate) fn clamp_norm(u: [f64; 2], cap: f64) -> [f64; 2] {
    let n = u[0].hypot(u[1]);
    if n > cap {
        [u[0] * cap / n, u[1] * cap / n]
    } else {
        u
    }
}

enum World {
    Push(PushWorld, PushController),
    Door(DoorWorld, DoorController),
}

impl World {
    fn state(&self) -> Vec<f64> {
        match self {
            World::Push(w, _) => w.disc.to_vec(),
            World::Door(w, _) => vec![w.hinge[0], w.hinge[1], w.theta],
        }
    }

    fn pusher(&self) -> [f64; 2] {
        match self {
            World::Push(w, _) => w.pusher,
            World::Door(w, _) => w.pusher,
        }
    }

    fn image(&self) -> Vec<f32> {
        match self {
            World::Push(w, _) => render(
                &[Shape::Disc {
                    center: w.disc,
                    radius: w.radius,
                }],
                Some(w.pusher),
            ),
            World::Door(w, _) => render(
                &[Shape::Segment {
                    a: w.hinge,
                    b: w.tip(),
                    half_width: render::DOOR_HALF_THICKNESS,
                }],
                Some(w.pusher),
            ),
        }
    }

    fn command(&mut self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        match self {
            World::Push(w, c) => c.command(w, rng),
            World::Door(w, c) => c.command(w, rng),
        }
    }

    fn step(&mut self, u: [f64; 2]) -> Reading {
        match self {
            World::Push(w, _) => w.step(u),
            World::Door(w, _) => w.step(u),
        }
    }
}

/// Independent random streams for trajectory `index`: physics/control and blackout.
pub fn trajectory_streams(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut physics = ChaCha8Rng::seed_from_u64(seed);
    physics.set_stream(2 * index as u64);
    let mut blackout = ChaCha8Rng::seed_from_u64(seed);
    blackout.set_stream(2 * index as u64 + 1);
    (physics, blackout)
}

/// Simulates one trajectory. Door trajectories alternate between grasped and free.
pub fn simulate(
    task: Task,
    n_steps: usize,
    blackout_prob: f64,
    seed: u64,
    index: usize,
) -> Trajectory {
    let (mut rng, mut dark) = trajectory_streams(seed, index);
    let mut world = match task {
        Task::Push => World::Push(PushWorld::random(&mut rng), PushController::default()),
        Task::Door => World::Door(
            DoorWorld::random(&mut rng, index % 2 == 1),
            DoorController::default(),
        ),
    };
    let n = task.state_dim();
    let mut traj = Trajectory::with_capacity(n_steps, n);
    let mut reading = match &world {
        World::Door(w, _) if w.grasped => Reading {
            force: [0.0; 3],
            contact: true,
        },
        _ => Reading::default(),
    };
    for _ in 0..n_steps {
        let blackout = dark.random_bool(blackout_prob);
        let obs = MultimodalObservation {
            image: if blackout {
                vec![0.0; IMAGE_PIXELS]
            } else {
                world.image()
            },
            force: if reading.contact {
                reading.force
            } else {
                [0.0; 3]
            },
            contact: reading.contact,
            proprio: world.pusher(),
            blackout,
        };
        let u = world.command(&mut rng);
        let p = world.pusher();
        traj.push(&world.state(), &[u[0], u[1], p[0], p[1]], &obs);
        reading = world.step(u);
    }
    traj
}

/// Parameters of a dataset generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub task: Task,
    pub n_traj: usize,
    pub n_steps: usize,
    pub blackout_prob: f64,
    pub seed: u64,
}

pub fn generate_dataset(spec: &GenerateSpec, jobs: usize) -> Result<TrajectoryDataset> {
    if !(0.0..=1.0).contains(&spec.blackout_prob) {
        return Err(FilterError::Config(format!(
            "blackout probability {} outside [0, 1]",
            spec.blackout_prob
        )));
    }
    if spec.n_traj == 0 || spec.n_steps == 0 {
        return Err(FilterError::Config("empty dataset requested".into()));
    }
    let trajectories = map_indexed(jobs, spec.n_traj, |i| {
        simulate(spec.task, spec.n_steps, spec.blackout_prob, spec.seed, i)
    });
    Ok(TrajectoryDataset {
        header: DatasetHeader {
            task: spec.task,
            n_traj: spec.n_traj,
            n_steps: spec.n_steps,
            state_dim: spec.task.state_dim(),
            control_dim: CONTROL_DIM,
            obs_dim: OBS_DIM,
            blackout_prob: spec.blackout_prob,
            seed: spec.seed,
        },
        trajectories,
    })
}
