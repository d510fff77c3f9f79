//! Full-length evaluation of estimators on held-out trajectories.

use std::fmt::Write as _;

use diffcore::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{stream, PURPOSE_EVAL};
use crate::error::{FilterError, Result};
use crate::frames::Frames;
use crate::fusion::{Architecture, Initial};
use crate::models::Dynamics;
use crate::parallel::map_indexed;
use crate::simenv::{Task, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub particles: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            particles: 100,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub index: usize,
    pub position_rmse_cm: f64,
    /// Mean absolute joint-angle error for door trajectories.
    pub angle_error_deg: Option<f64>,
    /// Position RMSE over frames with and without an image blackout.
    pub visible_rmse_cm: Option<f64>,
    pub blackout_rmse_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimator: String,
    pub task: Task,
    pub blackout_prob: f64,
    pub trajectories: Vec<TrajectoryResult>,
    pub position_rmse_cm: f64,
    pub angle_error_deg: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// RMSE of the first two (positional) state components, in centimeters.
/// `estimates` and `truth` are normalized; only frames where `keep` holds count.
pub fn position_rmse_cm(
    task: Task,
    estimates: &[Vec<f64>],
    truth: &[Vec<f64>],
    keep: impl Fn(usize) -> bool,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, (e, x)) in estimates.iter().zip(truth).enumerate() {
        if !keep(t) {
            continue;
        }
        let e = task.denormalize_state(e);
        let x = task.denormalize_state(x);
        sum += (e[0] - x[0]).powi(2) + (e[1] - x[1]).powi(2);
        count += 1;
    }
    (count > 0).then(|| 100.0 * (sum / count as f64).sqrt())
}

fn angle_error_deg(task: Task, estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Option<f64> {
    let k = task.angle_dim()?;
    let tau = std::f64::consts::TAU;
    mean(estimates.iter().zip(truth).map(|(e, x)| {
        let d = task.denormalize_state(e)[k] - task.denormalize_state(x)[k];
        let wrapped = d - tau * (d / tau).round();
        wrapped.abs().to_degrees()
    }))
}

/// Scores an arbitrary estimator. `estimator(i, frames, init)` returns normalized
/// estimates for every frame of trajectory `i` starting from the noisy belief `init`.
pub fn evaluate_with<F>(
    name: &str,
    data: &TrajectoryDataset,
    opts: EvalOptions,
    estimator: F,
) -> Result<EvalReport>
where
    F: Fn(usize, &Frames, &Initial) -> Result<Vec<Vec<f64>>> + Sync + Send,
{
    if data.is_empty() {
        return Err(FilterError::Config("evaluation dataset is empty".into()));
    }
    let task = data.task();
    let results = map_indexed(opts.jobs, data.len(), |i| -> Result<TrajectoryResult> {
        let frames = Frames::whole(task, &data.trajectories[i])?;
        let mut rng = stream(opts.seed, PURPOSE_EVAL, i as u64, 0);
        let init = Initial::noisy(frames.state(0), &mut rng);
        let est = estimator(i, &frames, &init)?;
        if est.len() != frames.len() {
            return Err(FilterError::DimMismatch {
                what: "estimate length",
                expected: frames.len(),
                got: est.len(),
            });
        }
        let truth: Vec<Vec<f64>> = (0..frames.len())
            .map(|t| frames.state(t).to_vec())
            .collect();
        Ok(TrajectoryResult {
            index: i,
            position_rmse_cm: position_rmse_cm(task, &est, &truth, |_| true).unwrap_or(0.0),
            angle_error_deg: angle_error_deg(task, &est, &truth),
            visible_rmse_cm: position_rmse_cm(task, &est, &truth, |t| !frames.blackout[t]),
            blackout_rmse_cm: position_rmse_cm(task, &est, &truth, |t| frames.blackout[t]),
        })
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        estimator: name.to_string(),
        task,
        blackout_prob: data.header.blackout_prob,
        position_rmse_cm: mean(trajectories.iter().map(|r| r.position_rmse_cm)).unwrap_or(0.0),
        angle_error_deg: mean(trajectories.iter().filter_map(|r| r.angle_error_deg)),
        trajectories,
    })
}

/// Filters every trajectory in full from a noisy initial belief.
pub fn evaluate(
    arch: &Architecture,
    data: &TrajectoryDataset,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if data.task() != arch.config.task {
        return Err(FilterError::Config(format!(
            "{} estimator cannot evaluate {} data",
            arch.config.task.name(),
            data.task().name()
        )));
    }
    evaluate_with(arch.kind().name(), data, opts, |i, frames, init| {
        arch.estimate(
            frames,
            init,
            opts.particles,
            opts.seed ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
        )
    })
}

/// Holds the initial belief mean forever.
pub fn static_baseline(data: &TrajectoryDataset, opts: EvalOptions) -> Result<EvalReport> {
    evaluate_with("static", data, opts, |_, frames, init| {
        Ok(vec![init.mean.clone(); frames.len()])
    })
}

/// Rolls the dynamics model forward from the initial belief mean, ignoring observations.
pub fn dead_reckoning(
    store: &ParamStore,
    dynamics: &(dyn Dynamics + Sync),
    data: &TrajectoryDataset,
    opts: EvalOptions,
) -> Result<EvalReport> {
    evaluate_with("dead-reckoning", data, opts, |_, frames, init| {
        let n = init.mean.len();
        let mut out = Vec::with_capacity(frames.len());
        let mut x = init.mean.clone();
        out.push(x.clone());
        for t in 1..frames.len() {
            let mut g = Graph::inference(store);
            let xv = g.constant(Tensor::row(&x));
            let u = g.constant(Tensor::row(frames.prev_control.row_slice(t)));
            let next = dynamics.predict(&mut g, xv, u)?;
            x = g.value(next).data()[..n].to_vec();
            out.push(x.clone());
        }
        Ok(out)
    })
}

/// Text table with one row per report, grouped by blackout level.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.blackout_prob.total_cmp(&b.blackout_prob));
    let angle = reports.iter().any(|r| r.angle_error_deg.is_some());
    let mut s = String::new();
    let _ = write!(s, "{:<16} {:>8} {:>10}", "estimator", "blackout", "rmse_cm");
    if angle {
        let _ = write!(s, " {:>10}", "angle_deg");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{:<16} {:>8.2} {:>10.3}",
            r.estimator, r.blackout_prob, r.position_rmse_cm
        );
        if angle {
            match r.angle_error_deg {
                Some(a) => {
                    let _ = write!(s, " {a:>10.3}");
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    /// One row per trajectory followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "estimator,blackout_prob,trajectory,position_rmse_cm,angle_error_deg,visible_rmse_cm,blackout_rmse_cm\n",
        );
        for r in &self.trajectories {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.estimator,
                self.blackout_prob,
                r.index,
                r.position_rmse_cm,
                opt(r.angle_error_deg),
                opt(r.visible_rmse_cm),
                opt(r.blackout_rmse_cm)
            );
        }
        let _ = writeln!(
            s,
            "{},{},mean,{},{},,",
            self.estimator,
            self.blackout_prob,
            self.position_rmse_cm,
            opt(self.angle_error_deg)
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} on {} (blackout {:.2})\n{:>10} {:>10} {:>10} {:>10}\n",
            self.estimator,
            self.task.name(),
            self.blackout_prob,
            "traj",
            "rmse_cm",
            "visible",
            "blackout"
        );
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for r in &self.trajectories {
            let _ = writeln!(
                s,
                "{:>10} {:>10.3} {:>10} {:>10}",
                r.index,
                r.position_rmse_cm,
                cell(r.visible_rmse_cm),
                cell(r.blackout_rmse_cm)
            );
        }
        let _ = writeln!(s, "{:>10} {:>10.3}", "mean", self.position_rmse_cm);
        if let Some(a) = self.angle_error_deg {
            let _ = writeln!(s, "mean angle error {a:.3} deg");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{generate_dataset, GenerateSpec};

    fn tiny(task: Task) -> TrajectoryDataset {
        generate_dataset(
            &GenerateSpec {
                task,
                n_traj: 3,
                n_steps: 12,
                blackout_prob: 0.3,
                seed: 5,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn oracle_scores_zero() {
        let data = tiny(Task::Door);
        let r = evaluate_with("oracle", &data, EvalOptions::default(), |_, f, _| {
            Ok((0..f.len()).map(|t| f.state(t).to_vec()).collect())
        })
        .unwrap();
        assert_eq!(r.position_rmse_cm, 0.0);
        assert_eq!(r.angle_error_deg, Some(0.0));
    }

    #[test]
    fn aggregate_is_mean_of_trajectories() {
        let data = tiny(Task::Push);
        let r = static_baseline(&data, EvalOptions::default()).unwrap();
        let m = r
            .trajectories
            .iter()
            .map(|t| t.position_rmse_cm)
            .sum::<f64>()
            / 3.0;
        assert!((r.position_rmse_cm - m).abs() < 1e-12);
        assert!(r.to_csv().lines().count() == 5);
    }

    #[test]
    fn angle_error_wraps() {
        let task = Task::Door;
        let full = task.normalize_state(&[0.0, 0.0, std::f64::consts::TAU - 0.01]);
        let e = angle_error_deg(task, &[full], &[vec![0.0; 3]]).unwrap();
        assert!((e - 0.01f64.to_degrees()).abs() < 1e-9);
    }
}
