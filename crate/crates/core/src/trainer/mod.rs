//! Pretraining curriculum, end-to-end truncated BPTT and evaluation.

mod checkpoint;
mod eval;

pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{
    dead_reckoning, evaluate, evaluate_with, position_rmse_cm, report_table, static_baseline,
    EvalOptions, EvalReport, TrajectoryResult,
};

use diffcore::{value_and_grad, AdamConfig, AdamState, GradBuffer, Graph, ParamId, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::frames::Frames;
use crate::fusion::{Architecture, Initial, Rollout};
use crate::models::{Dynamics, MeasurementModel};
use crate::parallel::map_indexed;
use crate::simenv::{Task, TrajectoryDataset};

pub const HORIZONS: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier for process and measurement noise parameters.
    pub noise_lr_scale: f64,
    pub batch_size: usize,
    /// End-to-end subsequence lengths, one stage each.
    pub schedule: Vec<usize>,
    pub epochs_per_stage: usize,
    pub batches_per_epoch: usize,
    pub horizons: Vec<usize>,
    pub dynamics_epochs: usize,
    pub measurement_epochs: usize,
    pub particles: usize,
    pub eval_particles: usize,
    pub seed: u64,
    /// Weight of the per-modality estimate errors added to the fused loss.
    pub unimodal_loss_weight: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Trajectories held out of the training split for early stopping.
    pub validation_trajectories: usize,
    pub max_grad_norm: f64,
    /// Standard deviation of the likelihood target during measurement pretraining.
    pub measurement_sigma: f64,
    pub measurement_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            noise_lr_scale: 10.0,
            batch_size: 16,
            schedule: vec![2, 4, 8, 16],
            epochs_per_stage: 10,
            batches_per_epoch: 8,
            horizons: HORIZONS.to_vec(),
            dynamics_epochs: 10,
            measurement_epochs: 30,
            particles: 30,
            eval_particles: 100,
            seed: 0,
            unimodal_loss_weight: 0.5,
            patience: 10,
            validation_trajectories: 0,
            max_grad_norm: 100.0,
            measurement_sigma: 0.1,
            measurement_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FilterError::Config(m.to_string()));
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return bad("schedule needs positive subsequence lengths");
        }
        if self.schedule.windows(2).any(|w| w[1] < w[0]) {
            return bad("schedule lengths must be non-decreasing");
        }
        if self.horizons != HORIZONS {
            return bad("pretraining horizons must be [1, 4, 8, 16]");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return bad("batch size and batches per epoch must be positive");
        }
        if self.particles == 0 || self.eval_particles == 0 {
            return bad("particle counts must be positive");
        }
        if !(self.lr >= 0.0) || !(self.noise_lr_scale >= 0.0) || !self.lr.is_finite() {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.measurement_sigma > 0.0) || self.measurement_samples == 0 {
            return bad("measurement target needs positive sigma and samples");
        }
        Ok(())
    }
}

/// One point of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPoint {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub validation: Option<f64>,
}

pub type LossCurve = Vec<LossPoint>;

/// Independent generator for `(purpose, a, b)`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(a.wrapping_mul(1 << 20).wrapping_add(b));
    rng
}

const PURPOSE_DYNAMICS: u64 = 1;
const PURPOSE_MEASUREMENT: u64 = 2;
const PURPOSE_SAMPLE: u64 = 3;
const PURPOSE_FILTER: u64 = 4;
const PURPOSE_VALIDATION: u64 = 5;
pub(crate) const PURPOSE_EVAL: u64 = 6;

fn trainable_mask(len: usize, ids: &[ParamId]) -> Vec<bool> {
    let mut m = vec![false; len];
    for id in ids {
        m[id.0] = true;
    }
    m
}

fn check_finite(loss: f64, phase: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(FilterError::Divergence {
            phase: phase.to_string(),
            step,
            detail: format!("loss is {loss}"),
        })
    }
}

fn clip(grads: &mut GradBuffer, max_norm: f64) {
    let n = grads.norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
}

/// Squared error per state dimension between `est` and `truth` (`[1, n]`), with the
/// angle dimension of door states wrapped to one revolution.
pub fn state_error(g: &mut Graph, task: Task, est: Var, truth: &[f64]) -> Result<Var> {
    let n = truth.len();
    let target = g.constant(Tensor::row(truth));
    let d = g.sub(est, target)?;
    let d = match task.angle_dim() {
        Some(k) => {
            // One revolution in normalized units.
            let period = 2.0 * std::f64::consts::PI / task.state_scale()[k];
            let v = g.value(d).data()[k];
            let turns = (v / period).round();
            if turns != 0.0 {
                let mut shift = Tensor::zeros(&[1, n]);
                shift.data_mut()[k] = turns * period;
                let shift = g.constant(shift);
                g.sub(d, shift)?
            } else {
                d
            }
        }
        None => d,
    };
    Ok(g.square(d)?)
}

/// Mean squared error of a rollout against `frames`, plus weighted per-modality terms.
pub fn rollout_loss(
    g: &mut Graph,
    task: Task,
    rollout: &Rollout,
    frames: &Frames,
    unimodal_weight: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(rollout.steps.len());
    let mut aux = Vec::new();
    for (t, s) in rollout.steps.iter().enumerate() {
        terms.push(state_error(g, task, s.estimate, frames.state(t))?);
        if let (Some(modal), true) = (s.modal, unimodal_weight > 0.0) {
            for m in modal {
                aux.push(state_error(g, task, m, frames.state(t))?);
            }
        }
    }
    let all = g.concat(&terms, 0)?;
    let mut loss = g.mean(all);
    if !aux.is_empty() {
        let all = g.concat(&aux, 0)?;
        let a = g.mean(all);
        let a = g.scale(a, unimodal_weight);
        loss = g.add(loss, a)?;
    }
    Ok(loss)
}

/// Loss of one subsequence starting from a noisy belief drawn from `rng`.
pub fn subsequence_loss(
    g: &mut Graph,
    arch: &Architecture,
    frames: &Frames,
    particles: usize,
    unimodal_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let init = Initial::noisy(frames.state(0), rng);
    let rollout = arch.rollout(g, frames, &init, particles, rng)?;
    rollout_loss(g, arch.config.task, &rollout, frames, unimodal_weight)
}

/// Random `(trajectory, start)` windows of length `len`.
fn sample_windows(
    data: &TrajectoryDataset,
    len: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..data.trajectories.len())
        .filter(|&i| data.trajectories[i].len() >= len)
        .collect();
    if eligible.is_empty() {
        return Err(FilterError::Config(format!(
            "no trajectory is at least {len} steps long"
        )));
    }
    Ok((0..count)
        .map(|_| {
            let i = eligible[rng.random_range(0..eligible.len())];
            let s = rng.random_range(0..=data.trajectories[i].len() - len);
            (i, s)
        })
        .collect())
}

/// Open-loop prediction error of `dynamics` over `horizon` steps for each window.
pub fn dynamics_loss(
    g: &mut Graph,
    dynamics: &dyn Dynamics,
    data: &TrajectoryDataset,
    windows: &[(usize, usize)],
    horizon: usize,
) -> Result<Var> {
    let task = data.task();
    let n = task.state_dim();
    let b = windows.len();
    let mut x0 = Vec::with_capacity(b * n);
    for &(i, s) in windows {
        x0.extend(task.normalize_state(&data.trajectories[i].state(s)));
    }
    let mut x = g.constant(Tensor::new(&[b, n], x0)?);
    let mut terms = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut u = Vec::with_capacity(b * 4);
        let mut target = Vec::with_capacity(b * n);
        for &(i, s) in windows {
            let traj = &data.trajectories[i];
            u.extend(crate::frames::normalize_control(&traj.control(s + k)));
            target.extend(task.normalize_state(&traj.state(s + k + 1)));
        }
        let u = g.constant(Tensor::new(&[b, 4], u)?);
        x = dynamics.predict(g, x, u)?;
        let target = g.constant(Tensor::new(&[b, n], target)?);
        let d = g.sub(x, target)?;
        terms.push(g.square(d)?);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all))
}

fn adam_for(arch: &Architecture, cfg: &TrainConfig) -> AdamState {
    let mut adam = AdamState::new(
        &arch.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    for id in arch.noise_params() {
        adam.set_lr_scale(id, cfg.noise_lr_scale);
    }
    adam
}

/// Curriculum over prediction horizons 1, 4, 8 and 16.
pub fn pretrain_dynamics(
    arch: &mut Architecture,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    let dynamics = arch.dynamics.clone().ok_or_else(|| {
        FilterError::Unsupported(format!("{} has no dynamics model", arch.kind()))
    })?;
    let ids = dynamics.params();
    let mask = trainable_mask(arch.store.len(), &ids);
    let mut adam = adam_for(arch, cfg);
    let mut curve = Vec::new();
    let mut step = 0;
    for (phase, &h) in cfg.horizons.iter().enumerate() {
        let name = format!("dynamics-h{h}");
        for epoch in 0..cfg.dynamics_epochs {
            let mut total = 0.0;
            for batch in 0..cfg.batches_per_epoch {
                let mut rng = stream(
                    cfg.seed,
                    PURPOSE_DYNAMICS,
                    (phase * 1000 + epoch) as u64,
                    batch as u64,
                );
                let windows = sample_windows(data, h + 1, cfg.batch_size, &mut rng)?;
                let (loss, grads) = value_and_grad(&arch.store, Some(&mask), |g| {
                    dynamics_loss(g, &dynamics, data, &windows, h)
                })?;
                check_finite(loss, &name, step)?;
                let mut buf = GradBuffer::new(&arch.store);
                buf.extend(&grads);
                clip(&mut buf, cfg.max_grad_norm);
                adam.step(&mut arch.store, &buf)?;
                total += loss;
                step += 1;
            }
            curve.push(LossPoint {
                phase: name.clone(),
                epoch,
                loss: total / cfg.batches_per_epoch as f64,
                validation: None,
            });
        }
    }
    Ok(curve)
}

/// Target log-density `log N(x; truth, sigma^2 I)` for each row of `states`.
pub fn likelihood_target(states: &[Vec<f64>], truth: &[f64], sigma: f64) -> Vec<f64> {
    let n = truth.len() as f64;
    let c = -0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    states
        .iter()
        .map(|x| {
            let d2: f64 = x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
            c - 0.5 * d2 / (sigma * sigma)
        })
        .collect()
}

fn measurement_model_loss(
    g: &mut Graph,
    model: &MeasurementModel,
    frames: &Frames,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let obs = frames.bind(g);
    let feats = model.observe(g, &obs)?;
    let n = frames.state_dim();
    let k = cfg.measurement_samples;
    let reach = 3.0 * cfg.measurement_sigma;
    let mut losses = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let truth = frames.state(t);
        let states: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                // The first sample sits on the ground truth.
                truth
                    .iter()
                    .map(|&x| {
                        if j == 0 {
                            x
                        } else {
                            x + rng.random_range(-reach..=reach)
                        }
                    })
                    .collect()
            })
            .collect();
        let target = likelihood_target(&states, truth, cfg.measurement_sigma);
        let flat: Vec<f64> = states.concat();
        let sv = g.constant(Tensor::new(&[k, n], flat)?);
        let ll = model.log_likelihood(g, &feats, t, sv)?;
        let target = g.constant(Tensor::vector(&target));
        losses.push(g.mse(ll, target)?);
    }
    let all = g.concat(&losses, 0)?;
    Ok(g.mean(all))
}

/// Regresses virtual sensors onto ground-truth states and measurement models onto
/// Gaussian log-densities around it. Covariance heads stay frozen.
pub fn pretrain_measurement(
    arch: &mut Architecture,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    let ids = arch.measurement_params();
    if ids.is_empty() {
        return Err(FilterError::Unsupported(format!(
            "{} has no measurement models",
            arch.kind()
        )));
    }
    let mask = trainable_mask(arch.store.len(), &ids);
    let mut adam = adam_for(arch, cfg);
    let task = data.task();
    let frames_total: Vec<(usize, usize)> = data
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
        .collect();
    if frames_total.is_empty() {
        return Err(FilterError::Config("empty dataset".into()));
    }
    let sensors = arch.sensors.clone();
    let models = arch.measurements.clone();
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.measurement_epochs {
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let mut rng = stream(cfg.seed, PURPOSE_MEASUREMENT, epoch as u64, batch as u64);
            let picks: Vec<(&crate::simenv::Trajectory, usize)> = (0..cfg.batch_size)
                .map(|_| {
                    let (i, s) = frames_total[rng.random_range(0..frames_total.len())];
                    (&data.trajectories[i], s)
                })
                .collect();
            let frames = Frames::gather(task, &picks)?;
            let (loss, grads) = value_and_grad(&arch.store, Some(&mask), |g| -> Result<Var> {
                let mut parts = Vec::new();
                if !sensors.is_empty() {
                    let obs = frames.bind(g);
                    let truth = g.constant(frames.states.clone());
                    for s in &sensors {
                        let (z, _) = s.sense(g, &obs, s.modalities)?;
                        parts.push(g.mse(z, truth)?);
                    }
                }
                for m in &models {
                    parts.push(measurement_model_loss(g, m, &frames, cfg, &mut rng)?);
                }
                let all = g.concat(&parts, 0)?;
                Ok(g.sum(all))
            })?;
            check_finite(loss, "measurement", step)?;
            let mut buf = GradBuffer::new(&arch.store);
            buf.extend(&grads);
            clip(&mut buf, cfg.max_grad_norm);
            adam.step(&mut arch.store, &buf)?;
            total += loss;
            step += 1;
        }
        curve.push(LossPoint {
            phase: "measurement".into(),
            epoch,
            loss: total / cfg.batches_per_epoch as f64,
            validation: None,
        });
    }
    Ok(curve)
}

/// Progress of an end-to-end run, persisted in checkpoints for resumption.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub meta: TrainMeta,
}

impl TrainState {
    pub fn fresh(arch: &Architecture, cfg: &TrainConfig) -> Self {
        Self {
            adam: adam_for(arch, cfg),
            meta: TrainMeta::default(),
        }
    }
}

/// Mean subsequence loss over `windows` with per-window random streams.
fn batch_gradients(
    arch: &Architecture,
    data: &TrajectoryDataset,
    windows: &[(usize, usize)],
    len: usize,
    cfg: &TrainConfig,
    seed_key: (u64, u64),
    jobs: usize,
) -> Result<(f64, GradBuffer)> {
    let task = data.task();
    let results = map_indexed(
        jobs,
        windows.len(),
        |k| -> Result<(f64, Vec<(ParamId, Tensor)>)> {
            let (i, s) = windows[k];
            let frames = Frames::from_trajectory(task, &data.trajectories[i], s, len)?;
            let mut rng = stream(
                cfg.seed,
                PURPOSE_FILTER,
                seed_key.0,
                seed_key.1 * 4096 + k as u64,
            );
            value_and_grad(&arch.store, None, |g| {
                subsequence_loss(
                    g,
                    arch,
                    &frames,
                    cfg.particles,
                    cfg.unimodal_loss_weight,
                    &mut rng,
                )
            })
        },
    );
    let mut buf = GradBuffer::new(&arch.store);
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        buf.extend(&grads);
    }
    let b = windows.len() as f64;
    buf.scale(1.0 / b);
    Ok((total / b, buf))
}

/// Mean loss on fixed validation windows of length `len` (no gradients).
fn validation_loss(
    arch: &Architecture,
    data: &TrajectoryDataset,
    len: usize,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<f64> {
    let task = data.task();
    let n = data.trajectories.len();
    let losses = map_indexed(jobs, n, |i| -> Result<f64> {
        let traj = &data.trajectories[i];
        let l = len.min(traj.len());
        let frames = Frames::from_trajectory(task, traj, 0, l)?;
        let mut rng = stream(cfg.seed, PURPOSE_VALIDATION, i as u64, l as u64);
        let mut g = Graph::inference(&arch.store);
        let loss = subsequence_loss(&mut g, arch, &frames, cfg.particles, 0.0, &mut rng)?;
        Ok(g.value(loss).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / n.max(1) as f64)
}

/// Truncated BPTT over growing subsequence lengths.
///
/// `state` carries optimizer moments and progress; an interrupted run resumed
/// from a saved state reproduces the uninterrupted one. On divergence the
/// parameters are restored to the last good step before the error is returned.
pub fn train_end_to_end(
    arch: &mut Architecture,
    train: &TrajectoryDataset,
    validation: Option<&TrajectoryDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    jobs: usize,
    mut on_epoch: impl FnMut(&LossPoint, &Architecture, &TrainState) -> Result<()>,
) -> Result<LossCurve> {
    cfg.validate()?;
    let total_epochs = cfg.schedule.len() * cfg.epochs_per_stage;
    let mut curve = Vec::new();
    let mut best = state.meta.best_store.take();
    while (state.meta.epoch as usize) < total_epochs && !state.meta.stopped {
        let epoch = state.meta.epoch as usize;
        let stage = epoch / cfg.epochs_per_stage.max(1);
        let len = cfg.schedule[stage];
        let phase = format!("end-to-end-l{len}");
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let mut rng = stream(cfg.seed, PURPOSE_SAMPLE, epoch as u64, batch as u64);
            let windows = sample_windows(train, len, cfg.batch_size, &mut rng)?;
            let good = arch.store.clone();
            let step = state.adam.step as usize;
            let outcome = batch_gradients(
                arch,
                train,
                &windows,
                len,
                cfg,
                (epoch as u64, batch as u64),
                jobs,
            )
            .and_then(|(loss, mut grads)| {
                check_finite(loss, &phase, step)?;
                clip(&mut grads, cfg.max_grad_norm);
                state.adam.step(&mut arch.store, &grads)?;
                Ok(loss)
            });
            match outcome {
                Ok(loss) => total += loss,
                Err(e) => {
                    arch.store = good;
                    let detail = e.to_string();
                    return Err(match e {
                        FilterError::Divergence { .. } => e,
                        _ => FilterError::Divergence {
                            phase,
                            step,
                            detail,
                        },
                    });
                }
            }
        }
        let val = match validation {
            Some(v) if !v.is_empty() => Some(validation_loss(arch, v, len, cfg, jobs)?),
            _ => None,
        };
        let point = LossPoint {
            phase,
            epoch,
            loss: total / cfg.batches_per_epoch as f64,
            validation: val,
        };
        state.meta.epoch += 1;
        if let Some(v) = val {
            // Lengths change between stages, so patience restarts with each stage.
            let stage_start = epoch.is_multiple_of(cfg.epochs_per_stage.max(1));
            if stage_start || v < state.meta.best_validation {
                state.meta.best_validation = v;
                state.meta.bad_epochs = 0;
                best = Some(arch.store.clone());
            } else {
                state.meta.bad_epochs += 1;
                if state.meta.bad_epochs >= cfg.patience as u64 {
                    let next_stage =
                        (epoch / cfg.epochs_per_stage.max(1) + 1) * cfg.epochs_per_stage.max(1);
                    if let Some(b) = best.take() {
                        arch.store = b;
                    }
                    state.meta.bad_epochs = 0;
                    if next_stage >= total_epochs {
                        state.meta.stopped = true;
                    } else {
                        state.meta.epoch = next_stage as u64;
                    }
                }
            }
        }
        state.meta.best_store = best.clone();
        on_epoch(&point, arch, state)?;
        state.meta.best_store = None;
        curve.push(point);
    }
    if let Some(b) = best {
        arch.store = b;
    }
    Ok(curve)
}
