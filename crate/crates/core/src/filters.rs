//! Recursive estimators: differentiable EKF, differentiable particle filter and
//! an LSTM baseline.

use diffcore::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::models::Dynamics;
use crate::nets::{
    Activation, LstmCell, Mlp, MlpSpec, ModalityEncoderSet, ModalitySet, NetConfig, ObsVars,
};

fn at_step(step: usize) -> impl Fn(DiffError) -> FilterError {
    move |e| match e {
        DiffError::NotPositiveDefinite { .. } => FilterError::Covariance { step, source: e },
        other => FilterError::Diff(other),
    }
}

/// Gaussian belief with mean `[1, n]` and covariance `[n, n]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBelief {
    pub mean: Var,
    pub cov: Var,
}

impl GaussianBelief {
    pub fn constant(g: &mut Graph, mean: &[f64], cov: Tensor) -> Self {
        Self {
            mean: g.constant(Tensor::row(mean)),
            cov: g.constant(cov),
        }
    }

    pub fn state_dim(&self, g: &Graph) -> usize {
        g.shape(self.mean)[1]
    }
}

/// `mu' = f(mu, u)`, `Sigma' = A Sigma A^T + Q`.
pub fn ekf_predict(
    g: &mut Graph,
    dynamics: &dyn Dynamics,
    belief: GaussianBelief,
    u: Var,
) -> Result<GaussianBelief> {
    let (mean, a) = dynamics.predict_with_jacobian(g, belief.mean, u)?;
    let q = dynamics.process_noise(g)?;
    let at = g.transpose(a)?;
    let asig = g.matmul(a, belief.cov)?;
    let cov = g.matmul(asig, at)?;
    let cov = g.add(cov, q)?;
    let cov = g.symmetrize(cov)?;
    Ok(GaussianBelief { mean, cov })
}

/// Kalman update with measurement `z` (`[1, m]`), noise `r` (`[m, m]`) and
/// linear observation matrix `h` (`[m, n]`).
pub fn ekf_update(
    g: &mut Graph,
    belief: GaussianBelief,
    z: Var,
    r: Var,
    h: &Tensor,
    step: usize,
) -> Result<GaussianBelief> {
    let m = h.rows();
    if g.shape(z) != [1, m] {
        return Err(FilterError::DimMismatch {
            what: "measurement",
            expected: m,
            got: g.shape(z).last().copied().unwrap_or(0),
        });
    }
    let hv = g.constant(h.clone());
    let ht = g.constant(h.transpose());
    let hs = g.matmul(hv, belief.cov)?;
    let s = g.matmul(hs, ht)?;
    let s = g.add(s, r)?;
    let s = g.symmetrize(s)?;
    let predicted = g.matmul(belief.mean, ht)?;
    let innovation = g.sub(z, predicted)?;
    // K^T = S^{-1} H Sigma
    let kt = g.spd_solve(s, hs).map_err(at_step(step))?;
    let correction = g.matmul(innovation, kt)?;
    let mean = g.add(belief.mean, correction)?;
    let hst = g.transpose(hs)?;
    let reduction = g.matmul(hst, kt)?;
    let cov = g.sub(belief.cov, reduction)?;
    let cov = g.symmetrize(cov)?;
    Ok(GaussianBelief { mean, cov })
}

/// Weighted particle set: states `[p, n]`, normalized log-weights `[p]`.
#[derive(Debug, Clone, Copy)]
pub struct ParticleBelief {
    pub states: Var,
    pub log_weights: Var,
}

impl ParticleBelief {
    /// Uniformly weighted particles drawn from `N(mean, diag(var))`.
    pub fn sample(
        g: &mut Graph,
        mean: &[f64],
        var: &[f64],
        n_particles: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = mean.len();
        let mut data = Vec::with_capacity(n_particles * n);
        for _ in 0..n_particles {
            for j in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                data.push(mean[j] + var[j].sqrt() * e);
            }
        }
        let states = g.constant(Tensor::new(&[n_particles, n], data).expect("sized"));
        Self::uniform(g, states)
    }

    pub fn uniform(g: &mut Graph, states: Var) -> Self {
        let p = g.shape(states)[0];
        let log_weights = g.constant(Tensor::full(&[p], -(p as f64).ln()));
        Self {
            states,
            log_weights,
        }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.states)[0]
    }

    pub fn weights(&self, g: &Graph) -> Vec<f64> {
        g.value(self.log_weights)
            .data()
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    pub fn effective_sample_size(&self, g: &Graph) -> f64 {
        1.0 / self.weights(g).iter().map(|w| w * w).sum::<f64>()
    }
}

/// Propagates every particle through `dynamics` and adds `L eps` noise, `eps ~ N(0, I)`.
pub fn pf_predict(
    g: &mut Graph,
    dynamics: &dyn Dynamics,
    belief: ParticleBelief,
    u: Var,
    noise_chol: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleBelief> {
    let p = belief.len(g);
    let n = dynamics.state_dim();
    let u = g.repeat_rows(u, p)?;
    let mut states = dynamics.predict(g, belief.states, u)?;
    if noise_chol.data().iter().any(|&v| v != 0.0) {
        let eps: Vec<f64> = (0..p * n).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(&[p, n], eps)?;
        let noise = diffcore::linalg::matmul(&eps, &noise_chol.transpose())?;
        let noise = g.constant(noise);
        states = g.add(states, noise)?;
    }
    Ok(ParticleBelief {
        states,
        log_weights: belief.log_weights,
    })
}

/// Adds per-particle log-likelihoods (`[p]`) and renormalizes.
pub fn pf_update(
    g: &mut Graph,
    belief: ParticleBelief,
    loglik: Var,
    step: usize,
) -> Result<ParticleBelief> {
    let p = belief.len(g);
    if g.shape(loglik) != [p] {
        return Err(FilterError::DimMismatch {
            what: "particle log-likelihoods",
            expected: p,
            got: g.value(loglik).numel(),
        });
    }
    let lw = g.add(belief.log_weights, loglik)?;
    let lse = g.logsumexp(lw)?;
    if !g.value(lse).item().is_finite() {
        return Err(FilterError::ParticleDepletion { step });
    }
    let log_weights = g.sub(lw, lse)?;
    Ok(ParticleBelief {
        states: belief.states,
        log_weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    Never,
    Always,
    /// Resample when the effective sample size falls below this fraction of the particle count.
    Ess(f64),
}

impl Default for ResampleMode {
    fn default() -> Self {
        ResampleMode::Ess(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleGradient {
    /// Resampled particles are constants.
    #[default]
    Detach,
    /// Resampled particles keep the gradient path to their parents.
    ThroughStates,
}

/// Systematic resampling indices for normalized `weights`.
pub fn systematic_indices(weights: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let p = weights.len();
    let start: f64 = rng.random::<f64>() / p as f64;
    let mut out = Vec::with_capacity(p);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..p {
        let pos = start + i as f64 / p as f64;
        while pos > cum && j + 1 < p {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Returns the (possibly) resampled belief and whether resampling happened.
pub fn pf_resample(
    g: &mut Graph,
    belief: ParticleBelief,
    mode: ResampleMode,
    gradient: ResampleGradient,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticleBelief, bool)> {
    let p = belief.len(g);
    let go = match mode {
        ResampleMode::Never => false,
        ResampleMode::Always => true,
        ResampleMode::Ess(threshold) => belief.effective_sample_size(g) < threshold * p as f64,
    };
    if !go {
        return Ok((belief, false));
    }
    let idx = systematic_indices(&belief.weights(g), rng);
    let states = match gradient {
        ResampleGradient::Detach => {
            let src = g.value(belief.states);
            let n = src.cols();
            let mut data = Vec::with_capacity(p * n);
            for &k in &idx {
                data.extend_from_slice(src.row_slice(k));
            }
            g.constant(Tensor::new(&[p, n], data)?)
        }
        ResampleGradient::ThroughStates => {
            let mut sel = Tensor::zeros(&[p, p]);
            for (i, &k) in idx.iter().enumerate() {
                sel.set2(i, k, 1.0);
            }
            let sel = g.constant(sel);
            g.matmul(sel, belief.states)?
        }
    };
    Ok((ParticleBelief::uniform(g, states), true))
}

/// Weighted particle mean `[1, n]`.
pub fn particle_mean(g: &mut Graph, belief: ParticleBelief) -> Result<Var> {
    let p = belief.len(g);
    let w = g.exp(belief.log_weights);
    let w = g.reshape(w, &[1, p])?;
    Ok(g.matmul(w, belief.states)?)
}

/// Hidden and cell states of the two stacked cells, `[batch, hidden]` each.
#[derive(Debug, Clone, Copy)]
pub struct LstmEstimatorState {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

/// Encoders (with control) -> shared trunk -> two LSTM cells -> fully connected -> affine.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmEstimator {
    pub state_dim: usize,
    pub encoders: ModalityEncoderSet,
    pub cell1: LstmCell,
    pub cell2: LstmCell,
    pub head: Mlp,
}

impl LstmEstimator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoders = ModalityEncoderSet::new(
            store,
            &format!("{name}.enc"),
            ModalitySet::ALL,
            true,
            net,
            rng,
        )?;
        let w = encoders.output_width();
        let h = net.lstm_width;
        let cell1 = LstmCell::new(store, &format!("{name}.lstm1"), w, h, rng);
        let cell2 = LstmCell::new(store, &format!("{name}.lstm2"), h, h, rng);
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            MlpSpec::new(vec![h, net.width, state_dim], Activation::Identity),
            rng,
        )?;
        Ok(Self {
            state_dim,
            encoders,
            cell1,
            cell2,
            head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoders.params();
        p.extend(self.cell1.params());
        p.extend(self.cell2.params());
        p.extend(self.head.params());
        p
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> LstmEstimatorState {
        let h = self.cell1.hidden;
        let z = Tensor::zeros(&[batch, h]);
        LstmEstimatorState {
            h1: g.constant(z.clone()),
            c1: g.constant(z.clone()),
            h2: g.constant(z.clone()),
            c2: g.constant(z),
        }
    }

    /// Per-frame features `[m, w]` for any number of frames.
    pub fn features(&self, g: &mut Graph, obs: &ObsVars, mask: ModalitySet) -> Result<Var> {
        self.encoders.encode(g, obs, mask)
    }

    /// One recurrent step on features `[batch, w]`; returns the new state and `[batch, n]` estimates.
    pub fn step(
        &self,
        g: &mut Graph,
        state: LstmEstimatorState,
        features: Var,
    ) -> Result<(LstmEstimatorState, Var)> {
        let (h1, c1) = self.cell1.step(g, features, state.h1, state.c1)?;
        let (h2, c2) = self.cell2.step(g, h1, state.h2, state.c2)?;
        let x = self.head.forward(g, h2)?;
        Ok((LstmEstimatorState { h1, c1, h2, c2 }, x))
    }
}
