//! Multimodal fusion architectures built from the filters and models.

use std::fmt;
use std::str::FromStr;

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::filters::{
    ekf_predict, ekf_update, particle_mean, pf_predict, pf_resample, pf_update, GaussianBelief,
    LstmEstimator, ParticleBelief, ResampleGradient, ResampleMode,
};
use crate::frames::Frames;
use crate::models::{
    CrossmodalWeightModel, CrossmodalWeights, DynamicsModel, MeasurementFeatures, MeasurementModel,
    VirtualSensor, WeightVariant,
};
use crate::nets::{ModalitySet, NetConfig};
use crate::simenv::Task;

/// First modality group: vision.
pub const M1: ModalitySet = ModalitySet::IMAGE;
/// Second modality group: touch and proprioception.
pub const M2: ModalitySet = ModalitySet::FORCE_PROPRIO;

/// Smallest eigenvalue tolerated in a fused covariance before diagonal loading.
pub const PSD_FLOOR: f64 = 1e-9;
pub const INIT_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    FeatureEkf,
    FeaturePf,
    UnimodalEkf,
    CrossmodalEkf,
    UnimodalPf,
    CrossmodalPf,
    Lstm,
}

impl ArchKind {
    pub const ALL: [ArchKind; 7] = [
        ArchKind::FeatureEkf,
        ArchKind::FeaturePf,
        ArchKind::UnimodalEkf,
        ArchKind::CrossmodalEkf,
        ArchKind::UnimodalPf,
        ArchKind::CrossmodalPf,
        ArchKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::FeatureEkf => "feature-ekf",
            ArchKind::FeaturePf => "feature-pf",
            ArchKind::UnimodalEkf => "unimodal-ekf",
            ArchKind::CrossmodalEkf => "crossmodal-ekf",
            ArchKind::UnimodalPf => "unimodal-pf",
            ArchKind::CrossmodalPf => "crossmodal-pf",
            ArchKind::Lstm => "lstm",
        }
    }

    pub fn is_ekf(self) -> bool {
        matches!(
            self,
            ArchKind::FeatureEkf | ArchKind::UnimodalEkf | ArchKind::CrossmodalEkf
        )
    }

    pub fn is_pf(self) -> bool {
        matches!(
            self,
            ArchKind::FeaturePf | ArchKind::UnimodalPf | ArchKind::CrossmodalPf
        )
    }

    pub fn is_crossmodal(self) -> bool {
        matches!(self, ArchKind::CrossmodalEkf | ArchKind::CrossmodalPf)
    }

    /// Kinds that run one model per modality group.
    pub fn is_split(self) -> bool {
        matches!(
            self,
            ArchKind::UnimodalEkf
                | ArchKind::CrossmodalEkf
                | ArchKind::UnimodalPf
                | ArchKind::CrossmodalPf
        )
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FilterError::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub task: Task,
    /// Channels used by the feature-fusion kinds.
    pub modalities: ModalitySet,
    pub net: NetConfig,
    /// Feed the fused belief back into both unimodal EKFs.
    pub feedback: bool,
    pub resample: ResampleMode,
    pub resample_gradient: ResampleGradient,
    /// Particle noise standard deviation as a fraction of the state spread.
    pub pf_noise_fraction: f64,
    /// Per-dimension spread of normalized states; empty means ones.
    pub state_std: Vec<f64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::CrossmodalEkf,
            task: Task::Push,
            modalities: ModalitySet::ALL,
            net: NetConfig::default(),
            feedback: false,
            resample: ResampleMode::default(),
            resample_gradient: ResampleGradient::default(),
            pf_noise_fraction: 0.01,
            state_std: Vec::new(),
        }
    }
}

impl ArchConfig {
    pub fn new(kind: ArchKind, task: Task) -> Self {
        Self {
            kind,
            task,
            ..Self::default()
        }
    }
}

/// Initial Gaussian belief with diagonal covariance, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Initial {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Initial {
    /// Ground truth plus `N(0, INIT_STD^2)` noise, with matching variance.
    pub fn noisy(truth: &[f64], rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("finite");
        Self {
            mean: truth.iter().map(|x| x + normal.sample(rng)).collect(),
            var: vec![INIT_STD * INIT_STD; truth.len()],
        }
    }
}

/// Per-step graph outputs of a rollout.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Fused point estimate `[1, n]`.
    pub estimate: Var,
    pub cov: Option<Var>,
    /// Per-modality estimates for the split kinds.
    pub modal: Option<[Var; 2]>,
    pub modal_cov: Option<[Var; 2]>,
    /// Crossmodal weights: `[1, n]` (EKF) or `[1, 1]` (PF) each.
    pub beta: Option<[Var; 2]>,
    pub resampled: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub steps: Vec<StepOutput>,
}

/// Precision-weighted product of two Gaussian experts.
pub fn product_of_experts(
    g: &mut Graph,
    a: GaussianBelief,
    b: GaussianBelief,
) -> Result<GaussianBelief> {
    let pa = g.inverse(a.cov)?;
    let pb = g.inverse(b.cov)?;
    let precision = g.add(pa, pb)?;
    let cov = g.inverse(precision)?;
    let cov = g.symmetrize(cov)?;
    let ia = g.matmul(a.mean, pa)?;
    let ib = g.matmul(b.mean, pb)?;
    let info = g.add(ia, ib)?;
    let mean = g.matmul(info, cov)?;
    Ok(GaussianBelief { mean, cov })
}

/// Elementwise weighted average of two Gaussian beliefs with weights `beta1`, `beta2` (`[1, n]`).
///
/// Covariances are weighted by `B = beta beta^T`. The weighted average is not
/// PSD for every input, so a diagonal load is added when the smallest
/// eigenvalue falls below [`PSD_FLOOR`].
pub fn crossmodal_ekf_fusion(
    g: &mut Graph,
    a: GaussianBelief,
    b: GaussianBelief,
    beta1: Var,
    beta2: Var,
) -> Result<GaussianBelief> {
    let n = g.shape(a.mean)[1];
    let wa = g.mul(beta1, a.mean)?;
    let wb = g.mul(beta2, b.mean)?;
    let num = g.add(wa, wb)?;
    let den = g.add(beta1, beta2)?;
    let mean = g.div(num, den)?;
    let v1 = g.reshape(beta1, &[n])?;
    let v2 = g.reshape(beta2, &[n])?;
    let b1 = g.outer(v1, v1)?;
    let b2 = g.outer(v2, v2)?;
    let ca = g.mul(b1, a.cov)?;
    let cb = g.mul(b2, b.cov)?;
    let num = g.add(ca, cb)?;
    let den = g.add(b1, b2)?;
    let cov = g.div(num, den)?;
    let cov = g.symmetrize(cov)?;
    let low = min_eigenvalue(g.value(cov));
    let cov = if low < PSD_FLOOR {
        let load = g.constant(Tensor::eye(n).map(|v| v * (PSD_FLOOR - low)));
        g.add(cov, load)?
    } else {
        cov
    };
    Ok(GaussianBelief { mean, cov })
}

pub fn min_eigenvalue(a: &Tensor) -> f64 {
    let n = a.rows();
    let m = DMatrix::from_row_slice(n, n, a.data());
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Per-particle `log(exp(l1) + exp(l2))` for `[p]` log-likelihoods.
pub fn unimodal_pf_loglik(g: &mut Graph, l1: Var, l2: Var) -> Result<Var> {
    mixture(g, l1, l2, None)
}

/// Per-particle `log(beta1 exp(l1) + beta2 exp(l2))` given `[1, 1]` log-weights.
pub fn crossmodal_pf_loglik(
    g: &mut Graph,
    l1: Var,
    l2: Var,
    log_beta1: Var,
    log_beta2: Var,
) -> Result<Var> {
    mixture(g, l1, l2, Some((log_beta1, log_beta2)))
}

fn mixture(g: &mut Graph, l1: Var, l2: Var, log_beta: Option<(Var, Var)>) -> Result<Var> {
    let p = g.value(l1).numel();
    let mut a = g.reshape(l1, &[p, 1])?;
    let mut b = g.reshape(l2, &[p, 1])?;
    if let Some((lb1, lb2)) = log_beta {
        a = g.add(a, lb1)?;
        b = g.add(b, lb2)?;
    }
    let both = g.concat(&[a, b], 1)?;
    Ok(g.logsumexp(both)?)
}

/// A complete estimator: parameters plus the models a kind needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ArchConfig,
    pub store: ParamStore,
    pub dynamics: Option<DynamicsModel>,
    pub sensors: Vec<VirtualSensor>,
    pub measurements: Vec<MeasurementModel>,
    pub weights: Option<CrossmodalWeightModel>,
    pub lstm: Option<LstmEstimator>,
}

impl Architecture {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let n = config.task.state_dim();
        if !config.state_std.is_empty() && config.state_std.len() != n {
            return Err(FilterError::DimMismatch {
                what: "state_std",
                expected: n,
                got: config.state_std.len(),
            });
        }
        if config.modalities.is_empty() {
            return Err(FilterError::EmptyModalityMask);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = &config.net;
        let kind = config.kind;
        let groups: Vec<ModalitySet> = if kind.is_split() {
            vec![M1, M2]
        } else {
            vec![config.modalities]
        };
        let dynamics = match kind {
            ArchKind::Lstm => None,
            _ => Some(DynamicsModel::new(
                &mut store,
                "dyn",
                n,
                crate::nets::CONTROL_INPUT,
                net,
                &mut rng,
            )?),
        };
        let mut sensors = Vec::new();
        let mut measurements = Vec::new();
        if kind.is_ekf() {
            for &m in &groups {
                sensors.push(VirtualSensor::new(
                    &mut store,
                    &format!("vs.{}", m.label()),
                    m,
                    n,
                    net,
                    &mut rng,
                )?);
            }
        }
        if kind.is_pf() {
            for &m in &groups {
                measurements.push(MeasurementModel::new(
                    &mut store,
                    &format!("mm.{}", m.label()),
                    m,
                    n,
                    net,
                    &mut rng,
                )?);
            }
        }
        let weights = match kind {
            ArchKind::CrossmodalEkf => Some(CrossmodalWeightModel::new(
                &mut store,
                "beta.ekf",
                WeightVariant::Ekf,
                n,
                net,
                &mut rng,
            )?),
            ArchKind::CrossmodalPf => Some(CrossmodalWeightModel::new(
                &mut store,
                "beta.pf",
                WeightVariant::Pf,
                n,
                net,
                &mut rng,
            )?),
            _ => None,
        };
        let lstm = match kind {
            ArchKind::Lstm => Some(LstmEstimator::new(&mut store, "lstm", n, net, &mut rng)?),
            _ => None,
        };
        Ok(Self {
            config,
            store,
            dynamics,
            sensors,
            measurements,
            weights,
            lstm,
        })
    }

    pub fn kind(&self) -> ArchKind {
        self.config.kind
    }

    pub fn state_dim(&self) -> usize {
        self.config.task.state_dim()
    }

    pub fn state_std(&self) -> Vec<f64> {
        if self.config.state_std.is_empty() {
            vec![1.0; self.state_dim()]
        } else {
            self.config.state_std.clone()
        }
    }

    /// Cholesky factor of the particle noise covariance.
    pub fn noise_chol(&self) -> Tensor {
        let d: Vec<f64> = self
            .state_std()
            .iter()
            .map(|s| s * self.config.pf_noise_fraction)
            .collect();
        Tensor::diag_matrix(&d)
    }

    pub fn dynamics_params(&self) -> Vec<ParamId> {
        self.dynamics
            .as_ref()
            .map(|d| d.params())
            .unwrap_or_default()
    }

    /// Parameters of virtual sensors and measurement models, excluding covariance heads.
    pub fn measurement_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for s in &self.sensors {
            let cov = s.cov_params();
            p.extend(s.params().into_iter().filter(|id| !cov.contains(id)));
        }
        for m in &self.measurements {
            p.extend(m.params());
        }
        p
    }

    /// Process-noise and measurement-covariance parameters.
    pub fn noise_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.dynamics.iter().map(|d| d.q_raw).collect();
        for s in &self.sensors {
            p.extend(s.cov_params());
        }
        p
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Copies every tensor whose name and shape match one in `other`; returns the count.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(src) = other.find(self.store.name(id)) {
                let t = other.get(src);
                if t.shape() == self.store.get(id).shape() {
                    *self.store.get_mut(id) = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Runs the estimator over `frames` from `init`. Step 0 is update-only.
    pub fn rollout(
        &self,
        g: &mut Graph,
        frames: &Frames,
        init: &Initial,
        n_particles: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout> {
        if frames.state_dim() != self.state_dim() || init.mean.len() != self.state_dim() {
            return Err(FilterError::DimMismatch {
                what: "rollout state",
                expected: self.state_dim(),
                got: frames.state_dim(),
            });
        }
        match self.kind() {
            ArchKind::Lstm => self.rollout_lstm(g, frames),
            k if k.is_ekf() => self.rollout_ekf(g, frames, init),
            _ => self.rollout_pf(g, frames, init, n_particles, rng),
        }
    }

    fn dyn_model(&self) -> Result<&DynamicsModel> {
        self.dynamics
            .as_ref()
            .ok_or_else(|| FilterError::Unsupported("architecture has no dynamics model".into()))
    }

    fn crossmodal_weights(
        &self,
        g: &mut Graph,
        frames: &Frames,
    ) -> Result<Option<CrossmodalWeights>> {
        match &self.weights {
            Some(w) => {
                let obs = frames.bind(g);
                Ok(Some(w.weights(g, &obs)?))
            }
            None => Ok(None),
        }
    }

    fn rollout_ekf(&self, g: &mut Graph, frames: &Frames, init: &Initial) -> Result<Rollout> {
        let n = self.state_dim();
        let dynamics = self.dyn_model()?;
        let obs = frames.bind(g);
        let mut sensed = Vec::with_capacity(self.sensors.len());
        for s in &self.sensors {
            sensed.push(s.sense(g, &obs, s.modalities)?);
        }
        let weights = self.crossmodal_weights(g, frames)?;
        let eye = Tensor::eye(n);
        let start = GaussianBelief::constant(g, &init.mean, Tensor::diag_matrix(&init.var));
        let mut beliefs = vec![start; self.sensors.len()];
        let mut out = Rollout::default();
        for t in 0..frames.len() {
            if t > 0 {
                let u = g.slice(obs.control, 0, t, 1)?;
                for b in beliefs.iter_mut() {
                    *b = ekf_predict(g, dynamics, *b, u)?;
                }
            }
            for (b, &(z, r)) in beliefs.iter_mut().zip(&sensed) {
                let zt = g.slice(z, 0, t, 1)?;
                let rt = g.slice(r, 0, t, 1)?;
                let rt = g.reshape(rt, &[n])?;
                let rt = g.diag_embed(rt)?;
                *b = ekf_update(g, *b, zt, rt, &eye, t)?;
            }
            let (fused, beta) = match self.kind() {
                ArchKind::FeatureEkf => (beliefs[0], None),
                ArchKind::UnimodalEkf => (product_of_experts(g, beliefs[0], beliefs[1])?, None),
                _ => {
                    let w = weights.expect("crossmodal kind has a weight model");
                    let b1 = g.slice(w.beta1, 0, t, 1)?;
                    let b2 = g.slice(w.beta2, 0, t, 1)?;
                    (
                        crossmodal_ekf_fusion(g, beliefs[0], beliefs[1], b1, b2)?,
                        Some([b1, b2]),
                    )
                }
            };
            let split = beliefs.len() == 2;
            out.steps.push(StepOutput {
                estimate: fused.mean,
                cov: Some(fused.cov),
                modal: split.then(|| [beliefs[0].mean, beliefs[1].mean]),
                modal_cov: split.then(|| [beliefs[0].cov, beliefs[1].cov]),
                beta,
                resampled: false,
            });
            if split && self.config.feedback {
                beliefs = vec![fused; 2];
            }
        }
        Ok(out)
    }

    fn rollout_pf(
        &self,
        g: &mut Graph,
        frames: &Frames,
        init: &Initial,
        n_particles: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout> {
        if n_particles == 0 {
            return Err(FilterError::Config(
                "particle count must be positive".into(),
            ));
        }
        let dynamics = self.dyn_model()?;
        let obs = frames.bind(g);
        let mut feats: Vec<MeasurementFeatures> = Vec::with_capacity(self.measurements.len());
        for m in &self.measurements {
            feats.push(m.observe(g, &obs)?);
        }
        let weights = self.crossmodal_weights(g, frames)?;
        let chol = self.noise_chol();
        let mut belief = ParticleBelief::sample(g, &init.mean, &init.var, n_particles, rng);
        let mut out = Rollout::default();
        for t in 0..frames.len() {
            if t > 0 {
                let u = g.slice(obs.control, 0, t, 1)?;
                belief = pf_predict(g, dynamics, belief, u, &chol, rng)?;
            }
            let mut lls = Vec::with_capacity(self.measurements.len());
            for (m, f) in self.measurements.iter().zip(&feats) {
                lls.push(m.log_likelihood(g, f, t, belief.states)?);
            }
            let mut beta = None;
            let ll = match self.kind() {
                ArchKind::FeaturePf => lls[0],
                ArchKind::UnimodalPf => unimodal_pf_loglik(g, lls[0], lls[1])?,
                _ => {
                    let w = weights.expect("crossmodal kind has a weight model");
                    let lb1 = g.slice(w.log_beta1, 0, t, 1)?;
                    let lb2 = g.slice(w.log_beta2, 0, t, 1)?;
                    let b1 = g.slice(w.beta1, 0, t, 1)?;
                    let b2 = g.slice(w.beta2, 0, t, 1)?;
                    beta = Some([b1, b2]);
                    crossmodal_pf_loglik(g, lls[0], lls[1], lb1, lb2)?
                }
            };
            let modal = if lls.len() == 2 {
                let mut means = [ll; 2];
                for (k, &l) in lls.iter().enumerate() {
                    let b = pf_update(g, belief, l, t)?;
                    means[k] = particle_mean(g, b)?;
                }
                Some(means)
            } else {
                None
            };
            belief = pf_update(g, belief, ll, t)?;
            let estimate = particle_mean(g, belief)?;
            let (next, resampled) = pf_resample(
                g,
                belief,
                self.config.resample,
                self.config.resample_gradient,
                rng,
            )?;
            belief = next;
            out.steps.push(StepOutput {
                estimate,
                cov: None,
                modal,
                modal_cov: None,
                beta,
                resampled,
            });
        }
        Ok(out)
    }

    fn rollout_lstm(&self, g: &mut Graph, frames: &Frames) -> Result<Rollout> {
        let lstm = self.lstm.as_ref().expect("lstm kind has an estimator");
        let obs = frames.bind(g);
        let feats = lstm.features(g, &obs, ModalitySet::ALL)?;
        let mut state = lstm.initial_state(g, 1);
        let mut out = Rollout::default();
        for t in 0..frames.len() {
            let f = g.slice(feats, 0, t, 1)?;
            let (next, x) = lstm.step(g, state, f)?;
            state = next;
            out.steps.push(StepOutput {
                estimate: x,
                cov: None,
                modal: None,
                modal_cov: None,
                beta: None,
                resampled: false,
            });
        }
        Ok(out)
    }

    /// Value-level estimates `[T][n]` in normalized units.
    pub fn estimate(
        &self,
        frames: &Frames,
        init: &Initial,
        n_particles: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.rollout(&mut g, frames, init, n_particles, &mut rng)?;
        Ok(r.steps
            .iter()
            .map(|s| g.value(s.estimate).data().to_vec())
            .collect())
    }

    /// Per-step interpretability record over a whole trajectory.
    pub fn trace(
        &self,
        frames: &Frames,
        init: &Initial,
        n_particles: usize,
        seed: u64,
    ) -> Result<Trace> {
        if !self.kind().is_split() {
            return Err(FilterError::Unsupported(format!(
                "tracing needs a unimodal or crossmodal architecture, got {}",
                self.kind()
            )));
        }
        let mut g = Graph::inference(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.rollout(&mut g, frames, init, n_particles, &mut rng)?;
        let task = self.config.task;
        let phys = |v: &[f64]| task.denormalize_state(v);
        let rows = r
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| TraceRow {
                t: frames.start + t,
                truth: phys(frames.state(t)),
                fused: phys(g.value(s.estimate).data()),
                modal: s
                    .modal
                    .map(|m| m.iter().map(|v| phys(g.value(*v).data())).collect())
                    .unwrap_or_default(),
                beta: s
                    .beta
                    .map(|b| b.iter().map(|v| g.value(*v).data().to_vec()).collect())
                    .unwrap_or_default(),
                contact: frames.contact[t],
                blackout: frames.blackout[t],
            })
            .collect();
        Ok(Trace { task, rows })
    }

    /// Log-likelihoods of measurement model `model` for frame `t` over a square grid of
    /// positional offsets around the true state. Row-major: index `i * cells + j` is
    /// offset `(dx_i, dy_j)`.
    pub fn likelihood_grid(
        &self,
        model: usize,
        frames: &Frames,
        t: usize,
        grid: GridSpec,
    ) -> Result<Vec<f64>> {
        let m = self.measurements.get(model).ok_or_else(|| {
            FilterError::Unsupported(format!("{} has no measurement model {model}", self.kind()))
        })?;
        let n = self.state_dim();
        let truth = frames.state(t);
        let offsets = grid.offsets();
        let mut states = Vec::with_capacity(offsets.len() * offsets.len() * n);
        for &dx in &offsets {
            for &dy in &offsets {
                let mut x = truth.to_vec();
                x[0] += dx;
                x[1] += dy;
                states.extend(x);
            }
        }
        let mut g = Graph::inference(&self.store);
        let obs = frames.bind_row(&mut g, t);
        let f = m.observe(&mut g, &obs)?;
        let states = g.constant(Tensor::new(&[offsets.len() * offsets.len(), n], states)?);
        let ll = m.log_likelihood(&mut g, &f, 0, states)?;
        Ok(g.value(ll).data().to_vec())
    }
}

/// Square grid of offsets `-half_range..=half_range` with `cells` points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_range: f64,
    pub cells: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            half_range: 0.2,
            cells: 41,
        }
    }
}

impl GridSpec {
    pub fn offsets(&self) -> Vec<f64> {
        let c = self.cells.max(2);
        (0..c)
            .map(|i| -self.half_range + 2.0 * self.half_range * i as f64 / (c - 1) as f64)
            .collect()
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_range / (self.cells.max(2) - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub truth: Vec<f64>,
    pub fused: Vec<f64>,
    pub modal: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub contact: bool,
    pub blackout: bool,
}

/// Interpretability trace in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub task: Task,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let n = self.task.state_dim();
        let first = self.rows.first();
        let n_modal = first.map_or(0, |r| r.modal.len());
        let beta_w = first.map_or(0, |r| r.beta.first().map_or(0, Vec::len));
        let mut head = vec!["t".to_string()];
        for prefix in ["truth", "fused"] {
            head.extend((0..n).map(|i| format!("{prefix}_{i}")));
        }
        for k in 0..n_modal {
            head.extend((0..n).map(|i| format!("m{}_{i}", k + 1)));
        }
        if beta_w > 0 {
            for k in 1..=2 {
                head.extend((0..beta_w).map(|i| format!("beta{k}_{i}")));
            }
        }
        head.push("contact".into());
        head.push("blackout".into());
        let mut s = head.join(",");
        s.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.t.to_string()];
            let nums = r
                .truth
                .iter()
                .chain(&r.fused)
                .chain(r.modal.iter().flatten())
                .chain(r.beta.iter().flatten());
            cells.extend(nums.map(|v| format!("{v}")));
            cells.push(u8::from(r.contact).to_string());
            cells.push(u8::from(r.blackout).to_string());
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}
