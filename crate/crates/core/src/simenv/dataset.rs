//! The `DFDS` trajectory container.
//!
//! Layout (little-endian): magic `DFDS`, then `u32` version, task id, trajectory
//! count, steps per trajectory, state dim, control dim, observation dim, an `f64`
//! blackout probability and a `u64` seed. Each trajectory follows as four `f32`
//! blocks: states, controls, observations (image, force, proprioception) and flags
//! (contact, blackout).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MultimodalObservation, Task, CONTROL_DIM, FLAG_DIM, FORCE_DIM, IMAGE_PIXELS, OBS_DIM};
use crate::error::{FilterError, Result};

pub const MAGIC: &[u8; 4] = b"DFDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub task: Task,
    pub n_traj: usize,
    pub n_steps: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub obs_dim: usize,
    pub blackout_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub state_dim: usize,
    pub states: Vec<f32>,
    pub controls: Vec<f32>,
    pub observations: Vec<f32>,
    pub flags: Vec<f32>,
}

impl Trajectory {
    pub fn with_capacity(steps: usize, state_dim: usize) -> Self {
        Self {
            state_dim,
            states: Vec::with_capacity(steps * state_dim),
            controls: Vec::with_capacity(steps * CONTROL_DIM),
            observations: Vec::with_capacity(steps * OBS_DIM),
            flags: Vec::with_capacity(steps * FLAG_DIM),
        }
    }

    pub fn push(&mut self, state: &[f64], control: &[f64], obs: &MultimodalObservation) {
        self.states.extend(state.iter().map(|&v| v as f32));
        self.controls.extend(control.iter().map(|&v| v as f32));
        self.observations.extend_from_slice(&obs.image);
        self.observations
            .extend(obs.force.iter().map(|&v| v as f32));
        self.observations
            .extend(obs.proprio.iter().map(|&v| v as f32));
        self.flags.push(obs.contact as u8 as f32);
        self.flags.push(obs.blackout as u8 as f32);
    }

    pub fn len(&self) -> usize {
        self.flags.len() / FLAG_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        let n = self.state_dim;
        self.states[t * n..(t + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn control(&self, t: usize) -> Vec<f64> {
        self.controls[t * CONTROL_DIM..(t + 1) * CONTROL_DIM]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn obs(&self, t: usize) -> &[f32] {
        &self.observations[t * OBS_DIM..(t + 1) * OBS_DIM]
    }

    pub fn image(&self, t: usize) -> &[f32] {
        &self.obs(t)[..IMAGE_PIXELS]
    }

    pub fn force(&self, t: usize) -> [f64; 3] {
        let o = &self.obs(t)[IMAGE_PIXELS..];
        [o[0] as f64, o[1] as f64, o[2] as f64]
    }

    pub fn proprio(&self, t: usize) -> [f64; 2] {
        let o = &self.obs(t)[IMAGE_PIXELS + FORCE_DIM..];
        [o[0] as f64, o[1] as f64]
    }

    pub fn contact(&self, t: usize) -> bool {
        self.flags[t * FLAG_DIM] != 0.0
    }

    pub fn blackout(&self, t: usize) -> bool {
        self.flags[t * FLAG_DIM + 1] != 0.0
    }

    pub fn observation(&self, t: usize) -> MultimodalObservation {
        MultimodalObservation {
            image: self.image(t).to_vec(),
            force: self.force(t),
            contact: self.contact(t),
            proprio: self.proprio(t),
            blackout: self.blackout(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub contact_fraction: f64,
    pub blackout_fraction: f64,
    pub frames: usize,
}

fn bad(reason: impl Into<String>) -> FilterError {
    FilterError::Format {
        kind: "DFDS",
        reason: reason.into(),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

impl TrajectoryDataset {
    pub fn task(&self) -> Task {
        self.header.task
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            h.task.id(),
            h.n_traj as u32,
            h.n_steps as u32,
            h.state_dim as u32,
            h.control_dim as u32,
            h.obs_dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&h.blackout_prob.to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        for t in &self.trajectories {
            write_f32s(w, &t.states)?;
            write_f32s(w, &t.controls)?;
            write_f32s(w, &t.observations)?;
            write_f32s(w, &t.flags)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let task = Task::from_id(read_u32(r)?).ok_or_else(|| bad("unknown task id"))?;
        let n_traj = read_u32(r)? as usize;
        let n_steps = read_u32(r)? as usize;
        let state_dim = read_u32(r)? as usize;
        let control_dim = read_u32(r)? as usize;
        let obs_dim = read_u32(r)? as usize;
        if state_dim != task.state_dim() || control_dim != CONTROL_DIM || obs_dim != OBS_DIM {
            return Err(bad("block dimensions inconsistent with task"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let blackout_prob = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            trajectories.push(Trajectory {
                state_dim,
                states: read_f32s(r, n_steps * state_dim)?,
                controls: read_f32s(r, n_steps * control_dim)?,
                observations: read_f32s(r, n_steps * obs_dim)?,
                flags: read_f32s(r, n_steps * FLAG_DIM)?,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes after last trajectory"));
        }
        Ok(Self {
            header: DatasetHeader {
                task,
                n_traj,
                n_steps,
                state_dim,
                control_dim,
                obs_dim,
                blackout_prob,
                seed,
            },
            trajectories,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    /// Splits off the last `n_test` trajectories as a held-out set.
    pub fn split(&self, n_test: usize) -> Result<(Self, Self)> {
        if n_test >= self.len() {
            return Err(FilterError::Config(format!(
                "cannot hold out {n_test} of {} trajectories",
                self.len()
            )));
        }
        let cut = self.len() - n_test;
        let part = |trajs: &[Trajectory]| Self {
            header: DatasetHeader {
                n_traj: trajs.len(),
                ..self.header.clone()
            },
            trajectories: trajs.to_vec(),
        };
        Ok((
            part(&self.trajectories[..cut]),
            part(&self.trajectories[cut..]),
        ))
    }

    pub fn stats(&self) -> DatasetStats {
        let (mut contact, mut dark, mut frames) = (0usize, 0usize, 0usize);
        for t in &self.trajectories {
            for s in 0..t.len() {
                contact += t.contact(s) as usize;
                dark += t.blackout(s) as usize;
            }
            frames += t.len();
        }
        let f = frames.max(1) as f64;
        DatasetStats {
            contact_fraction: contact as f64 / f,
            blackout_fraction: dark as f64 / f,
            frames,
        }
    }

    /// Per-dimension standard deviation of the normalized ground-truth state.
    pub fn state_std(&self) -> Vec<f64> {
        let task = self.task();
        let n = task.state_dim();
        let (mut s1, mut s2, mut count) = (vec![0.0; n], vec![0.0; n], 0.0);
        for t in &self.trajectories {
            for k in 0..t.len() {
                let x = task.normalize_state(&t.state(k));
                for i in 0..n {
                    s1[i] += x[i];
                    s2[i] += x[i] * x[i];
                }
                count += 1.0;
            }
        }
        (0..n)
            .map(|i| {
                let m = s1[i] / count;
                (s2[i] / count - m * m).max(0.0).sqrt()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, GenerateSpec};
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let d = generate_dataset(
            &GenerateSpec {
                task: Task::Door,
                n_traj: 3,
                n_steps: 20,
                blackout_prob: 0.4,
                seed: 9,
            },
            1,
        )
        .unwrap();
        let mut bytes = Vec::new();
        d.write(&mut bytes).unwrap();
        let back = TrajectoryDataset::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);
        let expected = 4 + 7 * 4 + 16 + 3 * 20 * (3 + CONTROL_DIM + OBS_DIM + FLAG_DIM) * 4;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let d = generate_dataset(
            &GenerateSpec {
                task: Task::Push,
                n_traj: 1,
                n_steps: 5,
                blackout_prob: 0.0,
                seed: 1,
            },
            1,
        )
        .unwrap();
        let mut bytes = Vec::new();
        d.write(&mut bytes).unwrap();
        assert!(TrajectoryDataset::read(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TrajectoryDataset::read(&mut extra.as_slice()).is_err());
        bytes[0] = b'X';
        assert!(TrajectoryDataset::read(&mut bytes.as_slice()).is_err());
    }
}
