//! Oracles and fixtures shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use diffcore::{Graph, ParamStore, Tensor};
use mmfilter::filters::{
    ekf_predict, ekf_update, particle_mean, pf_predict, pf_resample, pf_update, GaussianBelief,
    ParticleBelief, ResampleGradient, ResampleMode,
};
use mmfilter::models::LinearDynamics;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| randn(rng))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    (&a * a.transpose()) * (scale / n as f64) + DMatrix::identity(n, n) * floor
}

pub fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(&[m.nrows(), m.ncols()], data).unwrap()
}

pub fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// A random stable linear-Gaussian system with a simulated trajectory.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Diagonal measurement noise variances.
    pub r: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma0: DMatrix<f64>,
    pub controls: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
}

impl LinearSystem {
    /// State dimension 1..=4, `steps` measurements. Control `t` drives the
    /// transition into step `t`.
    pub fn random(seed: u64, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=n);
        let c = rng.random_range(1..=2);
        let raw = random_matrix(&mut rng, n, n);
        // Spectral norm at most 0.9, so the state stays bounded.
        let norm = raw.singular_values().max();
        let a = raw * (0.9 / norm.max(0.9));
        let b = random_matrix(&mut rng, n, c) * 0.5;
        let h = random_matrix(&mut rng, m, n);
        let q = random_spd(&mut rng, n, 0.1, 0.02);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        let mu0: Vec<f64> = (0..n).map(|_| 2.0 * randn(&mut rng)).collect();
        let sigma0 = random_spd(&mut rng, n, 0.5, 0.1);
        let lq = q.clone().cholesky().unwrap().l();
        let l0 = sigma0.clone().cholesky().unwrap().l();
        let mut x =
            DVector::from_vec(mu0.clone()) + &l0 * DVector::from_fn(n, |_, _| randn(&mut rng));
        let (mut controls, mut measurements, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..steps {
            let u = DVector::from_fn(c, |_, _| randn(&mut rng));
            if t > 0 {
                x = &a * &x + &b * &u + &lq * DVector::from_fn(n, |_, _| randn(&mut rng));
            }
            let z = &h * &x + DVector::from_fn(m, |i, _| r[i].sqrt() * randn(&mut rng));
            controls.push(u.iter().copied().collect());
            measurements.push(z.iter().copied().collect());
            truth.push(x.iter().copied().collect());
        }
        Self {
            a,
            b,
            h,
            q,
            r,
            mu0,
            sigma0,
            controls,
            measurements,
            truth,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn dynamics(&self) -> LinearDynamics {
        LinearDynamics {
            m: to_tensor(&self.a),
            b: to_tensor(&self.b),
            q: to_tensor(&self.q),
        }
    }

    /// Textbook Kalman filter: predict (from step 1), then update, at every step.
    pub fn kalman(&self) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n();
        let r = DMatrix::from_diagonal(&DVector::from_vec(self.r.clone()));
        let mut mu = DVector::from_vec(self.mu0.clone());
        let mut p = self.sigma0.clone();
        let mut out = Vec::with_capacity(self.measurements.len());
        for (t, z) in self.measurements.iter().enumerate() {
            if t > 0 {
                let u = DVector::from_vec(self.controls[t].clone());
                mu = &self.a * &mu + &self.b * u;
                p = &self.a * &p * self.a.transpose() + &self.q;
            }
            let s = &self.h * &p * self.h.transpose() + &r;
            let k = &p * self.h.transpose() * s.try_inverse().unwrap();
            let z = DVector::from_vec(z.clone());
            mu = &mu + &k * (z - &self.h * &mu);
            p = (DMatrix::identity(n, n) - &k * &self.h) * &p;
            out.push((mu.clone(), p.clone()));
        }
        out
    }

    /// The differentiable EKF with the true linear models substituted in.
    pub fn ekf(&self) -> Vec<(Vec<f64>, Tensor)> {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let dynamics = self.dynamics();
        let h = to_tensor(&self.h);
        let r = Tensor::diag_matrix(&self.r);
        let mut belief = GaussianBelief::constant(&mut g, &self.mu0, to_tensor(&self.sigma0));
        let mut out = Vec::with_capacity(self.measurements.len());
        for (t, z) in self.measurements.iter().enumerate() {
            if t > 0 {
                let u = g.constant(Tensor::row(&self.controls[t]));
                belief = ekf_predict(&mut g, &dynamics, belief, u).unwrap();
            }
            let zv = g.constant(Tensor::row(z));
            let rv = g.constant(r.clone());
            belief = ekf_update(&mut g, belief, zv, rv, &h, t).unwrap();
            out.push((
                g.value(belief.mean).data().to_vec(),
                g.value(belief.cov).clone(),
            ));
        }
        out
    }

    /// Bootstrap particle filter posterior means.
    pub fn particle_filter(&self, particles: usize, seed: u64) -> Vec<Vec<f64>> {
        let store = ParamStore::new();
        let dynamics = self.dynamics();
        let ht = to_tensor(&self.h.transpose());
        let noise = to_tensor(&self.q.clone().cholesky().unwrap().l());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l0 = to_tensor(&self.sigma0.clone().cholesky().unwrap().l());
        let n = self.n();
        let mut out = Vec::with_capacity(self.measurements.len());
        let mut states = {
            let eps: Vec<f64> = (0..particles * n).map(|_| randn(&mut rng)).collect();
            let eps = Tensor::new(&[particles, n], eps).unwrap();
            let mut s = diffcore::linalg::matmul(&eps, &l0.transpose()).unwrap();
            for row in s.data_mut().chunks_mut(n) {
                for (v, m) in row.iter_mut().zip(&self.mu0) {
                    *v += m;
                }
            }
            s
        };
        let mut log_weights = Tensor::full(&[particles], -(particles as f64).ln());
        // A fresh graph per step keeps memory flat; nothing here is differentiated.
        for (t, z) in self.measurements.iter().enumerate() {
            let mut g = Graph::inference(&store);
            let sv = g.constant(states.clone());
            let lw = g.constant(log_weights.clone());
            let mut belief = ParticleBelief {
                states: sv,
                log_weights: lw,
            };
            if t > 0 {
                let u = g.constant(Tensor::row(&self.controls[t]));
                belief = pf_predict(&mut g, &dynamics, belief, u, &noise, &mut rng).unwrap();
            }
            let htv = g.constant(ht.clone());
            let pred = g.matmul(belief.states, htv).unwrap();
            let zv = g.constant(Tensor::vector(z));
            let rv = g.constant(Tensor::vector(&self.r));
            let ll = g.gaussian_logpdf_diag(pred, zv, rv).unwrap();
            belief = pf_update(&mut g, belief, ll, t).unwrap();
            let mean = particle_mean(&mut g, belief).unwrap();
            out.push(g.value(mean).data().to_vec());
            let (b, _) = pf_resample(
                &mut g,
                belief,
                ResampleMode::Ess(0.5),
                ResampleGradient::Detach,
                &mut rng,
            )
            .unwrap();
            states = g.value(b.states).clone();
            log_weights = g.value(b.log_weights).clone();
        }
        out
    }
}

/// `sum_t |a_t - b_t| / sum_t |b_t|` with Euclidean norms per step.
pub fn trajectory_relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| norm(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>()))
        .sum();
    let den: f64 = b.iter().map(|y| norm(y)).sum();
    num / den
}

/// One-sided sign test: probability of at least `wins` successes in `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    // log C(n, k) accumulated term by term to stay in range.
    let ln_half_n = trials as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for k in 0..=trials {
        if k > 0 {
            ln_c += ((trials - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (ln_c + ln_half_n).exp();
        }
    }
    total.min(1.0)
}
