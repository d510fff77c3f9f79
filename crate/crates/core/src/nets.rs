//! Network building blocks: MLPs, LSTM cells and per-modality encoder sets.

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Softplus => g.softplus(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    /// Elementwise derivative at the pre-activation `pre`, given the output `out`.
    fn derivative(self, g: &mut Graph, pre: Var, out: Var) -> Option<Var> {
        match self {
            Activation::Identity => None,
            Activation::Relu => {
                let mask = g.value(pre).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Some(g.constant(mask))
            }
            Activation::Softplus => Some(g.sigmoid(pre)),
            Activation::Sigmoid => {
                let neg = g.neg(out);
                let one_minus = g.shift(neg, 1.0);
                g.mul(out, one_minus).ok()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by the output width of every layer.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub output: Activation,
}

impl MlpSpec {
    /// ReLU hidden layers with residual skips.
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            residual: true,
            output,
        }
    }

    /// `input -> width x layers` with a ReLU output, as used by encoders and trunks.
    pub fn stack(input: usize, width: usize, layers: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(width, layers.max(1)));
        Self::new(widths, Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(FilterError::Config(format!(
                "mlp needs at least one layer of nonzero width, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers() {
            self.output
        } else {
            self.activation
        }
    }

    fn skips(&self, i: usize) -> bool {
        self.residual && i + 1 < self.layers() && self.widths[i] == self.widths[i + 1]
    }
}

/// Uniform draws in `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl Mlp {
    /// He-uniform weights for ReLU layers, Xavier-uniform otherwise; zero biases.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..spec.layers() {
            let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
            let bound = if spec.layer_activation(i) == Activation::Relu {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            weights.push(store.add(
                format!("{name}.l{i}.w"),
                uniform(rng, &[fan_in, fan_out], bound),
            ));
            biases.push(store.add(format!("{name}.l{i}.b"), Tensor::zeros(&[fan_out])));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }

    /// Zeroes the final layer so the network starts at a constant output.
    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        let w = *self.weights.last().expect("validated");
        let b = *self.biases.last().expect("validated");
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b).data_mut().fill(0.0);
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.spec.input_width() {
            return Err(FilterError::DimMismatch {
                what: "mlp input width",
                expected: self.spec.input_width(),
                got: s.last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// `x` is `[m, in]`; returns `[m, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for i in 0..self.spec.layers() {
            let w = g.param(self.weights[i]);
            let b = g.param(self.biases[i]);
            let z = g.matmul(h, w)?;
            let pre = g.add(z, b)?;
            let mut out = self.spec.layer_activation(i).apply(g, pre);
            if self.spec.skips(i) {
                out = g.add(out, h)?;
            }
            h = out;
        }
        Ok(h)
    }

    /// Forward pass of a single row `x` (`[1, in]`) carrying tangent rows `t` (`[k, in]`).
    ///
    /// Returns the output and the directional derivatives `[k, out]`, both recorded
    /// as ordinary first-order tape operations.
    pub fn forward_tangent(&self, g: &mut Graph, x: Var, t: Var) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        if g.shape(x)[0] != 1 {
            return Err(FilterError::DimMismatch {
                what: "tangent forward rows",
                expected: 1,
                got: g.shape(x)[0],
            });
        }
        let (mut h, mut th) = (x, t);
        for i in 0..self.spec.layers() {
            let w = g.param(self.weights[i]);
            let b = g.param(self.biases[i]);
            let z = g.matmul(h, w)?;
            let pre = g.add(z, b)?;
            let tpre = g.matmul(th, w)?;
            let act = self.spec.layer_activation(i);
            let mut out = act.apply(g, pre);
            let mut tout = match act.derivative(g, pre, out) {
                Some(d) => g.mul(tpre, d)?,
                None => tpre,
            };
            if self.spec.skips(i) {
                out = g.add(out, h)?;
                tout = g.add(tout, th)?;
            }
            h = out;
            th = tout;
        }
        Ok((h, th))
    }
}

/// Gate order along the last axis: input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

pub const FORGET_BIAS: f64 = 1.0;

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bx = (6.0 / (input + hidden) as f64).sqrt();
        let bh = (6.0 / (2 * hidden) as f64).sqrt();
        let w_x = store.add(format!("{name}.wx"), uniform(rng, &[input, 4 * hidden], bx));
        let w_h = store.add(
            format!("{name}.wh"),
            uniform(rng, &[hidden, 4 * hidden], bh),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(FORGET_BIAS);
        let bias = store.add(format!("{name}.b"), Tensor::vector(&b));
        Self {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.bias]
    }

    /// One recurrence step over a batch: `x [m, in]`, `h, c [m, hidden]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let m = g.shape(x)[0];
        if g.shape(x) != [m, self.input]
            || g.shape(h) != [m, self.hidden]
            || g.shape(c) != [m, self.hidden]
        {
            return Err(FilterError::DimMismatch {
                what: "lstm step input",
                expected: self.input,
                got: g.shape(x).last().copied().unwrap_or(0),
            });
        }
        let wx = g.param(self.w_x);
        let wh = g.param(self.w_h);
        let b = g.param(self.bias);
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(h, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, b)?;
        let n = self.hidden;
        let gi = g.slice(z, 1, 0, n)?;
        let gf = g.slice(z, 1, n, n)?;
        let gg = g.slice(z, 1, 2 * n, n)?;
        let go = g.slice(z, 1, 3 * n, n)?;
        let i = g.sigmoid(gi);
        let f = g.sigmoid(gf);
        let cand = g.tanh(gg);
        let o = g.sigmoid(go);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Which observation channels a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySet {
    pub image: bool,
    pub force: bool,
    pub proprio: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        image: true,
        force: true,
        proprio: true,
    };
    pub const IMAGE: ModalitySet = ModalitySet {
        image: true,
        force: false,
        proprio: false,
    };
    pub const FORCE_PROPRIO: ModalitySet = ModalitySet {
        image: false,
        force: true,
        proprio: true,
    };
    pub const NONE: ModalitySet = ModalitySet {
        image: false,
        force: false,
        proprio: false,
    };

    pub fn is_empty(self) -> bool {
        !(self.image || self.force || self.proprio)
    }

    pub fn contains(self, other: ModalitySet) -> bool {
        (!other.image || self.image)
            && (!other.force || self.force)
            && (!other.proprio || self.proprio)
    }

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.image {
            parts.push("image");
        }
        if self.force {
            parts.push("force");
        }
        if self.proprio {
            parts.push("proprio");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = ModalitySet::NONE;
        for part in s.split('+').map(str::trim) {
            match part {
                "image" => m.image = true,
                "force" => m.force = true,
                "proprio" => m.proprio = true,
                "all" => m = ModalitySet::ALL,
                other => return Err(FilterError::Config(format!("unknown modality `{other}`"))),
            }
        }
        Ok(m)
    }
}

pub const IMAGE_INPUT: usize = crate::simenv::IMAGE_PIXELS;
/// `(fx, fy, tau_z, contact)`.
pub const FORCE_INPUT: usize = 4;
pub const PROPRIO_INPUT: usize = 2;
pub const CONTROL_INPUT: usize = crate::simenv::CONTROL_DIM;

/// Widths shared by all networks of an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub width: usize,
    pub encoder_layers: usize,
    pub trunk_layers: usize,
    pub lstm_width: usize,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 32,
            encoder_layers: 3,
            trunk_layers: 3,
            lstm_width: 64,
            residual: true,
        }
    }
}

/// Observation inputs bound to a graph, one row per frame.
#[derive(Debug, Clone, Copy)]
pub struct ObsVars {
    pub image: Var,
    pub force: Var,
    pub proprio: Var,
    pub control: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoderSet {
    pub configured: ModalitySet,
    pub image: Option<Mlp>,
    pub force: Option<Mlp>,
    pub proprio: Option<Mlp>,
    pub control: Option<Mlp>,
    pub trunk: Mlp,
}

impl ModalityEncoderSet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modalities: ModalitySet,
        with_control: bool,
        net: &NetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(FilterError::EmptyModalityMask);
        }
        let w = net.width;
        let mut enc =
            |on: bool, label: &str, input: usize, rng: &mut ChaCha8Rng| -> Result<Option<Mlp>> {
                if !on {
                    return Ok(None);
                }
                let mut spec = MlpSpec::stack(input, w, net.encoder_layers);
                spec.residual = net.residual;
                Mlp::new(store, &format!("{name}.{label}"), spec, rng).map(Some)
            };
        let image = enc(modalities.image, "image", IMAGE_INPUT, rng)?;
        let force = enc(modalities.force, "force", FORCE_INPUT, rng)?;
        let proprio = enc(modalities.proprio, "proprio", PROPRIO_INPUT, rng)?;
        let control = enc(with_control, "control", CONTROL_INPUT, rng)?;
        let parts = [&image, &force, &proprio, &control]
            .iter()
            .filter(|e| e.is_some())
            .count();
        let mut spec = MlpSpec::stack(parts * w, w, net.trunk_layers);
        spec.residual = net.residual;
        let trunk = Mlp::new(store, &format!("{name}.trunk"), spec, rng)?;
        Ok(Self {
            configured: modalities,
            image,
            force,
            proprio,
            control,
            trunk,
        })
    }

    pub fn output_width(&self) -> usize {
        self.trunk.spec.output_width()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.image, &self.force, &self.proprio, &self.control]
            .into_iter()
            .flatten()
            .flat_map(Mlp::params)
            .chain(self.trunk.params())
            .collect()
    }

    /// Encoder outputs in trunk order; modalities outside `mask` contribute zeros.
    pub fn features(&self, g: &mut Graph, obs: &ObsVars, mask: ModalitySet) -> Result<Vec<Var>> {
        if mask.is_empty() {
            return Err(FilterError::EmptyModalityMask);
        }
        for (wanted, have, label) in [
            (mask.image, self.configured.image, "image"),
            (mask.force, self.configured.force, "force"),
            (mask.proprio, self.configured.proprio, "proprio"),
        ] {
            if wanted && !have {
                return Err(FilterError::ModalityNotConfigured(label));
            }
        }
        let rows = g.shape(obs.image)[0];
        let mut parts = Vec::new();
        for (net, input, on) in [
            (&self.image, obs.image, mask.image),
            (&self.force, obs.force, mask.force),
            (&self.proprio, obs.proprio, mask.proprio),
            (&self.control, obs.control, true),
        ] {
            let Some(net) = net else { continue };
            if on {
                parts.push(net.forward(g, input)?);
            } else {
                parts.push(g.constant(Tensor::zeros(&[rows, net.spec.output_width()])));
            }
        }
        Ok(parts)
    }

    /// Concatenated encoder features passed through the shared trunk: `[m, width]`.
    pub fn encode(&self, g: &mut Graph, obs: &ObsVars, mask: ModalitySet) -> Result<Var> {
        let parts = self.features(g, obs, mask)?;
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        self.trunk.forward(g, cat)
    }
}
