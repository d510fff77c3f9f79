//! Learnable filter components: dynamics, virtual sensors, particle measurement
//! models and crossmodal weight models.

use diffcore::{softplus_inv, Graph, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::nets::{Activation, Mlp, MlpSpec, ModalityEncoderSet, ModalitySet, NetConfig, ObsVars};

/// Diagonal floor added to every learned covariance.
pub const COV_FLOOR: f64 = 1e-8;
/// Lower bound on crossmodal EKF weights.
pub const BETA_EPS: f64 = 1e-6;
pub const INITIAL_PROCESS_NOISE: f64 = 1e-3;

/// State transition used by both filter families.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Mean prediction for every row of `x` (`[k, n]`) under controls `u` (`[k, c]`).
    fn predict(&self, g: &mut Graph, x: Var, u: Var) -> Result<Var>;
    /// Mean prediction of a single row (`[1, n]`) and its Jacobian `[n, n]`.
    fn predict_with_jacobian(&self, g: &mut Graph, x: Var, u: Var) -> Result<(Var, Var)>;
    /// Process noise covariance `[n, n]`.
    fn process_noise(&self, g: &mut Graph) -> Result<Var>;
}

fn check_dims(g: &Graph, x: Var, u: Var, n: usize, c: usize) -> Result<()> {
    let (sx, su) = (g.shape(x), g.shape(u));
    if sx.len() != 2 || sx[1] != n {
        return Err(FilterError::DimMismatch {
            what: "state",
            expected: n,
            got: sx.last().copied().unwrap_or(0),
        });
    }
    if su.len() != 2 || su[1] != c || su[0] != sx[0] {
        return Err(FilterError::DimMismatch {
            what: "control",
            expected: c,
            got: su.last().copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// `x' = x + f1(x, u) * sigmoid(f2(x, u))` with constant diagonal process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub state_dim: usize,
    pub control_dim: usize,
    pub f1: Mlp,
    pub f2: Mlp,
    /// Pre-softplus process-noise diagonal.
    pub q_raw: ParamId,
}

impl DynamicsModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        control_dim: usize,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = net.width;
        let input = state_dim + control_dim;
        let mut spec = MlpSpec::new(vec![input, w, w, state_dim], Activation::Identity);
        spec.residual = net.residual;
        let f1 = Mlp::new(store, &format!("{name}.f1"), spec.clone(), rng)?;
        // Start from the identity map.
        f1.zero_last_layer(store);
        spec.widths = vec![input, w, w, 1];
        let f2 = Mlp::new(store, &format!("{name}.f2"), spec, rng)?;
        let q0 = softplus_inv(INITIAL_PROCESS_NOISE);
        let q_raw = store.add(format!("{name}.q"), Tensor::full(&[state_dim], q0));
        Ok(Self {
            state_dim,
            control_dim,
            f1,
            f2,
            q_raw,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.f1.params();
        p.extend(self.f2.params());
        p.push(self.q_raw);
        p
    }

    /// Value-level Jacobian from one reverse pass per output dimension.
    pub fn jacobian_reverse(&self, store: &ParamStore, x: &[f64], u: &[f64]) -> Result<Tensor> {
        let n = self.state_dim;
        let mut g = Graph::inference(store);
        let xv = g.leaf(Tensor::row(x));
        let uv = g.constant(Tensor::row(u));
        let y = self.predict(&mut g, xv, uv)?;
        let tape: &Tape = &g;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let mut seed = Tensor::zeros(&[1, n]);
            seed.data_mut()[i] = 1.0;
            let grads = tape.pullback(y, seed)?;
            let row = grads.get_or_zeros(xv, &Tensor::zeros(&[1, n]));
            for j in 0..n {
                a.set2(i, j, row.data()[j]);
            }
        }
        Ok(a)
    }
}

impl Dynamics for DynamicsModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn predict(&self, g: &mut Graph, x: Var, u: Var) -> Result<Var> {
        check_dims(g, x, u, self.state_dim, self.control_dim)?;
        let z = g.concat(&[x, u], 1)?;
        let step = self.f1.forward(g, z)?;
        let gate = self.f2.forward(g, z)?;
        let gate = g.sigmoid(gate);
        let delta = g.scale_rows(step, gate)?;
        Ok(g.add(x, delta)?)
    }

    fn predict_with_jacobian(&self, g: &mut Graph, x: Var, u: Var) -> Result<(Var, Var)> {
        check_dims(g, x, u, self.state_dim, self.control_dim)?;
        let (n, c) = (self.state_dim, self.control_dim);
        let z = g.concat(&[x, u], 1)?;
        let mut dirs = Tensor::zeros(&[n, n + c]);
        for i in 0..n {
            dirs.set2(i, i, 1.0);
        }
        let dirs = g.constant(dirs);
        let (step, dstep) = self.f1.forward_tangent(g, z, dirs)?;
        let (gate_pre, dgate_pre) = self.f2.forward_tangent(g, z, dirs)?;
        let gate = g.sigmoid(gate_pre);
        let delta = g.scale_rows(step, gate)?;
        let mean = g.add(x, delta)?;
        // Row i of `jt` is the derivative of the output along input direction i.
        let neg = g.neg(gate);
        let one_minus = g.shift(neg, 1.0);
        let slope = g.mul(gate, one_minus)?;
        let slope = g.reshape(slope, &[1])?;
        let dgate = g.mul(dgate_pre, slope)?;
        let ones = g.constant(Tensor::ones(&[1, n]));
        let gate_row = g.matmul(gate, ones)?;
        let scaled = g.mul(dstep, gate_row)?;
        let cross = g.matmul(dgate, step)?;
        let eye = g.eye(n);
        let jt = g.add(scaled, cross)?;
        let jt = g.add(jt, eye)?;
        let a = g.transpose(jt)?;
        Ok((mean, a))
    }

    fn process_noise(&self, g: &mut Graph) -> Result<Var> {
        let q = g.param(self.q_raw);
        let q = g.softplus(q);
        let q = g.shift(q, COV_FLOOR);
        Ok(g.diag_embed(q)?)
    }
}

/// `x' = M x + B u` with fixed noise; used as an analytic oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub m: Tensor,
    pub b: Tensor,
    pub q: Tensor,
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.m.rows()
    }

    fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn predict(&self, g: &mut Graph, x: Var, u: Var) -> Result<Var> {
        check_dims(g, x, u, self.state_dim(), self.control_dim())?;
        let mt = g.constant(self.m.transpose());
        let bt = g.constant(self.b.transpose());
        let a = g.matmul(x, mt)?;
        let b = g.matmul(u, bt)?;
        Ok(g.add(a, b)?)
    }

    fn predict_with_jacobian(&self, g: &mut Graph, x: Var, u: Var) -> Result<(Var, Var)> {
        let mean = self.predict(g, x, u)?;
        let a = g.constant(self.m.clone());
        Ok((mean, a))
    }

    fn process_noise(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.constant(self.q.clone()))
    }
}

/// Discriminative observation-to-state regressor with a learned diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSensor {
    pub modalities: ModalitySet,
    pub encoders: ModalityEncoderSet,
    pub state_head: Mlp,
    pub cov_head: Mlp,
}

impl VirtualSensor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modalities: ModalitySet,
        state_dim: usize,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoders =
            ModalityEncoderSet::new(store, &format!("{name}.enc"), modalities, false, net, rng)?;
        let w = encoders.output_width();
        let state_head = Mlp::new(
            store,
            &format!("{name}.state"),
            MlpSpec::new(vec![w, state_dim], Activation::Identity),
            rng,
        )?;
        let cov_head = Mlp::new(
            store,
            &format!("{name}.cov"),
            MlpSpec::new(vec![w, state_dim], Activation::Identity),
            rng,
        )?;
        cov_head.zero_last_layer(store);
        Ok(Self {
            modalities,
            encoders,
            state_head,
            cov_head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoders.params();
        p.extend(self.state_head.params());
        p.extend(self.cov_head.params());
        p
    }

    pub fn cov_params(&self) -> Vec<ParamId> {
        self.cov_head.params()
    }

    /// Measurements `z` (`[m, n]`) and diagonal variances `r` (`[m, n]`).
    pub fn sense(&self, g: &mut Graph, obs: &ObsVars, mask: ModalitySet) -> Result<(Var, Var)> {
        if !self.modalities.contains(mask) {
            return Err(FilterError::ModalityNotConfigured(
                if mask.image && !self.modalities.image {
                    "image"
                } else if mask.force && !self.modalities.force {
                    "force"
                } else {
                    "proprio"
                },
            ));
        }
        let feat = self.encoders.encode(g, obs, mask)?;
        let z = self.state_head.forward(g, feat)?;
        let r = self.cov_head.forward(g, feat)?;
        let r = g.softplus(r);
        let r = g.shift(r, COV_FLOOR);
        Ok((z, r))
    }
}

/// Per-frame quantities a measurement model needs before seeing particles.
#[derive(Debug, Clone, Copy)]
pub struct MeasurementFeatures {
    /// Trunk features `[m, w]`.
    pub features: Var,
    /// Gaussian component mean `[m, n]`.
    pub mean: Var,
    /// Gaussian component variance `[m, n]`.
    pub var: Var,
}

/// Particle log-likelihood model: a Gaussian term centered on an
/// observation-conditioned location plus a learned correction on
/// `(observation features, state embedding)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub modalities: ModalitySet,
    pub state_dim: usize,
    pub encoders: ModalityEncoderSet,
    pub mean_head: Mlp,
    pub var_head: Mlp,
    pub state_embed: Mlp,
    pub head: Mlp,
}

pub const INITIAL_MEASUREMENT_STD: f64 = 0.1;

impl MeasurementModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modalities: ModalitySet,
        state_dim: usize,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoders =
            ModalityEncoderSet::new(store, &format!("{name}.enc"), modalities, false, net, rng)?;
        let w = encoders.output_width();
        let linear = |widths: Vec<usize>| MlpSpec::new(widths, Activation::Identity);
        let mean_head = Mlp::new(
            store,
            &format!("{name}.mean"),
            linear(vec![w, state_dim]),
            rng,
        )?;
        mean_head.zero_last_layer(store);
        let var_head = Mlp::new(
            store,
            &format!("{name}.var"),
            linear(vec![w, state_dim]),
            rng,
        )?;
        var_head.zero_last_layer(store);
        let b = *var_head.biases.last().expect("one layer");
        store.get_mut(b).data_mut().fill(softplus_inv(
            INITIAL_MEASUREMENT_STD * INITIAL_MEASUREMENT_STD,
        ));
        let mut embed = MlpSpec::stack(state_dim, w, 2);
        embed.residual = net.residual;
        let state_embed = Mlp::new(store, &format!("{name}.embed"), embed, rng)?;
        let mut head = MlpSpec::new(vec![2 * w, w, 1], Activation::Identity);
        head.residual = net.residual;
        let head = Mlp::new(store, &format!("{name}.head"), head, rng)?;
        head.zero_last_layer(store);
        Ok(Self {
            modalities,
            state_dim,
            encoders,
            mean_head,
            var_head,
            state_embed,
            head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoders.params();
        for m in [
            &self.mean_head,
            &self.var_head,
            &self.state_embed,
            &self.head,
        ] {
            p.extend(m.params());
        }
        p
    }

    pub fn observe(&self, g: &mut Graph, obs: &ObsVars) -> Result<MeasurementFeatures> {
        let features = self.encoders.encode(g, obs, self.modalities)?;
        let mean = self.mean_head.forward(g, features)?;
        let var = self.var_head.forward(g, features)?;
        let var = g.softplus(var);
        let var = g.shift(var, COV_FLOOR);
        Ok(MeasurementFeatures {
            features,
            mean,
            var,
        })
    }

    /// Log-likelihood `[p]` of frame `row` for each particle in `states` (`[p, n]`).
    pub fn log_likelihood(
        &self,
        g: &mut Graph,
        feats: &MeasurementFeatures,
        row: usize,
        states: Var,
    ) -> Result<Var> {
        let s = g.shape(states).to_vec();
        if s.len() != 2 || s[1] != self.state_dim {
            return Err(FilterError::DimMismatch {
                what: "particle states",
                expected: self.state_dim,
                got: s.last().copied().unwrap_or(0),
            });
        }
        let p = s[0];
        let mean = g.slice(feats.mean, 0, row, 1)?;
        let var = g.slice(feats.var, 0, row, 1)?;
        let base = g.gaussian_logpdf_diag(states, mean, var)?;
        let f = g.slice(feats.features, 0, row, 1)?;
        let f = g.repeat_rows(f, p)?;
        let e = self.state_embed.forward(g, states)?;
        let joint = g.concat(&[f, e], 1)?;
        let c = self.head.forward(g, joint)?;
        let c = g.reshape(c, &[p])?;
        Ok(g.add(base, c)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightVariant {
    /// One positive weight per state dimension and modality.
    Ekf,
    /// A normalized scalar pair.
    Pf,
}

/// Weights for the two modality groups, with their logarithms.
#[derive(Debug, Clone, Copy)]
pub struct CrossmodalWeights {
    pub beta1: Var,
    pub beta2: Var,
    pub log_beta1: Var,
    pub log_beta2: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossmodalWeightModel {
    pub variant: WeightVariant,
    pub state_dim: usize,
    pub encoders: ModalityEncoderSet,
    pub head: Mlp,
}

impl CrossmodalWeightModel {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: WeightVariant,
        state_dim: usize,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoders = ModalityEncoderSet::new(
            store,
            &format!("{name}.enc"),
            ModalitySet::ALL,
            false,
            net,
            rng,
        )?;
        let out = match variant {
            WeightVariant::Ekf => 2 * state_dim,
            WeightVariant::Pf => 2,
        };
        let w = encoders.output_width();
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            MlpSpec::new(vec![w, out], Activation::Identity),
            rng,
        )?;
        head.zero_last_layer(store);
        Ok(Self {
            variant,
            state_dim,
            encoders,
            head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoders.params();
        p.extend(self.head.params());
        p
    }

    /// EKF variant: `[m, n]` each; PF variant: `[m, 1]` each with `beta1 + beta2 = 1`.
    pub fn weights(&self, g: &mut Graph, obs: &ObsVars) -> Result<CrossmodalWeights> {
        let feat = self.encoders.encode(g, obs, ModalitySet::ALL)?;
        let logits = self.head.forward(g, feat)?;
        match self.variant {
            WeightVariant::Ekf => {
                let n = self.state_dim;
                let b = g.softplus(logits);
                let b = g.shift(b, BETA_EPS);
                let beta1 = g.slice(b, 1, 0, n)?;
                let beta2 = g.slice(b, 1, n, n)?;
                let log_beta1 = g.log(beta1);
                let log_beta2 = g.log(beta2);
                Ok(CrossmodalWeights {
                    beta1,
                    beta2,
                    log_beta1,
                    log_beta2,
                })
            }
            WeightVariant::Pf => {
                // softmax over two logits, written via the logit difference
                let l1 = g.slice(logits, 1, 0, 1)?;
                let l2 = g.slice(logits, 1, 1, 1)?;
                let d = g.sub(l1, l2)?;
                let beta1 = g.sigmoid(d);
                let neg = g.neg(beta1);
                let beta2 = g.shift(neg, 1.0);
                let nd = g.neg(d);
                let sp = g.softplus(nd);
                let log_beta1 = g.neg(sp);
                let sp2 = g.softplus(d);
                let log_beta2 = g.neg(sp2);
                Ok(CrossmodalWeights {
                    beta1,
                    beta2,
                    log_beta1,
                    log_beta2,
                })
            }
        }
    }
}
