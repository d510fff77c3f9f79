//! Normalized network inputs for a window of trajectory frames.

use diffcore::{Graph, Tensor};

use crate::error::{FilterError, Result};
use crate::nets::{ObsVars, CONTROL_INPUT, FORCE_INPUT, IMAGE_INPUT, PROPRIO_INPUT};
use crate::simenv::{Task, Trajectory, COMMAND_SCALE, FORCE_SCALE, HALF_WIDTH, TORQUE_SCALE};

/// Frames `start..start + len` of one trajectory, in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub task: Task,
    pub start: usize,
    pub image: Tensor,
    pub force: Tensor,
    pub proprio: Tensor,
    pub control: Tensor,
    /// Control issued one step earlier (zeros before the first frame).
    pub prev_control: Tensor,
    /// Normalized ground-truth states `[len, n]`.
    pub states: Tensor,
    pub contact: Vec<bool>,
    pub blackout: Vec<bool>,
}

pub fn normalize_force(force: [f64; 3], contact: bool) -> [f64; 4] {
    [
        force[0] / FORCE_SCALE,
        force[1] / FORCE_SCALE,
        force[2] / TORQUE_SCALE,
        if contact { 1.0 } else { 0.0 },
    ]
}

pub fn normalize_control(c: &[f64]) -> [f64; 4] {
    [
        c[0] / COMMAND_SCALE,
        c[1] / COMMAND_SCALE,
        c[2] / HALF_WIDTH,
        c[3] / HALF_WIDTH,
    ]
}

impl Frames {
    pub fn from_trajectory(
        task: Task,
        traj: &Trajectory,
        start: usize,
        len: usize,
    ) -> Result<Self> {
        if len == 0 || start + len > traj.len() {
            return Err(FilterError::Config(format!(
                "frame window {start}..{} outside trajectory of length {}",
                start + len,
                traj.len()
            )));
        }
        let items: Vec<(&Trajectory, usize)> = (start..start + len).map(|t| (traj, t)).collect();
        let mut f = Self::gather(task, &items)?;
        f.start = start;
        Ok(f)
    }

    /// Stacks arbitrary `(trajectory, step)` frames into one batch.
    pub fn gather(task: Task, items: &[(&Trajectory, usize)]) -> Result<Self> {
        let len = items.len();
        if len == 0 {
            return Err(FilterError::Config("no frames to gather".into()));
        }
        let n = task.state_dim();
        let mut image = Vec::with_capacity(len * IMAGE_INPUT);
        let mut force = Vec::with_capacity(len * FORCE_INPUT);
        let mut proprio = Vec::with_capacity(len * PROPRIO_INPUT);
        let mut control = Vec::with_capacity(len * CONTROL_INPUT);
        let mut prev_control = Vec::with_capacity(len * CONTROL_INPUT);
        let mut states = Vec::with_capacity(len * n);
        let (mut contact, mut blackout) = (Vec::with_capacity(len), Vec::with_capacity(len));
        for &(traj, t) in items {
            if t >= traj.len() || traj.state_dim != n {
                return Err(FilterError::Config(format!(
                    "frame {t} not available for task {}",
                    task.name()
                )));
            }
            image.extend(traj.image(t).iter().map(|&v| v as f64));
            force.extend(normalize_force(traj.force(t), traj.contact(t)));
            proprio.extend(traj.proprio(t).iter().map(|v| v / HALF_WIDTH));
            control.extend(normalize_control(&traj.control(t)));
            if t == 0 {
                prev_control.extend([0.0; CONTROL_INPUT]);
            } else {
                prev_control.extend(normalize_control(&traj.control(t - 1)));
            }
            states.extend(task.normalize_state(&traj.state(t)));
            contact.push(traj.contact(t));
            blackout.push(traj.blackout(t));
        }
        Ok(Self {
            task,
            start: 0,
            image: Tensor::new(&[len, IMAGE_INPUT], image)?,
            force: Tensor::new(&[len, FORCE_INPUT], force)?,
            proprio: Tensor::new(&[len, PROPRIO_INPUT], proprio)?,
            control: Tensor::new(&[len, CONTROL_INPUT], control)?,
            prev_control: Tensor::new(&[len, CONTROL_INPUT], prev_control)?,
            states: Tensor::new(&[len, n], states)?,
            contact,
            blackout,
        })
    }

    pub fn whole(task: Task, traj: &Trajectory) -> Result<Self> {
        Self::from_trajectory(task, traj, 0, traj.len())
    }

    pub fn len(&self) -> usize {
        self.contact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contact.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        self.states.row_slice(t)
    }

    /// Binds all frames as graph constants; the control channel carries the previous control.
    pub fn bind(&self, g: &mut Graph) -> ObsVars {
        ObsVars {
            image: g.constant(self.image.clone()),
            force: g.constant(self.force.clone()),
            proprio: g.constant(self.proprio.clone()),
            control: g.constant(self.prev_control.clone()),
        }
    }

    /// Binds the single frame `t`.
    pub fn bind_row(&self, g: &mut Graph, t: usize) -> ObsVars {
        let row = |x: &Tensor| Tensor::row(x.row_slice(t));
        ObsVars {
            image: g.constant(row(&self.image)),
            force: g.constant(row(&self.force)),
            proprio: g.constant(row(&self.proprio)),
            control: g.constant(row(&self.prev_control)),
        }
    }
}
