//! Define-by-run gradient tape.
//!
//! Every value produced during a forward pass lives in the tape's node arena and
//! is addressed by a [`Var`]. Nodes that depend on no tracked input are stored as
//! constants and never receive gradients. Node ids are assigned in creation order,
//! which is a topological order of the recorded graph.

use crate::error::{DiffError, Result};
use crate::linalg;
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) u32);

impl Var {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax(Var),
    LogSumExp(Var),
    Outer(Var, Var),
    Diag(Var),
    DiagEmbed(Var),
    Cholesky(Var),
    Inverse(Var),
    TriSolve {
        l: Var,
        b: Var,
        transpose: bool,
    },
    GaussDiag {
        x: Var,
        mean: Var,
        var: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// How a binary elementwise op lines up its operands.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// Right operand repeats over the left operand's leading dimension.
    Rhs,
    /// Left operand repeats over the right operand's leading dimension.
    Lhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let repeats = |big: &[usize], small: &[usize]| {
        !big.is_empty()
            && (small == &big[1..]
                || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..]))
            || (big.len() == 1 && small == [1])
    };
    if repeats(a, b) {
        Ok(Broadcast::Rhs)
    } else if repeats(b, a) {
        Ok(Broadcast::Lhs)
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Gradient map produced by a backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id()).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when it received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and re-arms backward.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len() as u32;
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id()].requires_grad
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.id()].requires_grad)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta.shape(), tb.shape())?;
        let (ad, bd) = (ta.data(), tb.data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
            Broadcast::Same => (
                ta.shape().to_vec(),
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let p = bd.len();
                (
                    ta.shape().to_vec(),
                    ad.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bd[i % p]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let p = ad.len();
                (
                    tb.shape().to_vec(),
                    bd.iter()
                        .enumerate()
                        .map(|(i, &y)| f(ad[i % p], y))
                        .collect(),
                )
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Addition of a constant scalar.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Shift(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Scales row `i` of `a` (`[m, n]`) by `s[i]` where `s` is `[m]` or `[m, 1]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let m = ta.rows();
        let ok = ta.rank() == 2 && ts.numel() == m && (ts.rank() == 1 || ts.shape() == [m, 1]);
        if !ok {
            return Err(DiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: ta.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for i in 0..m {
            let si = ts.data()[i];
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= si);
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ScaleRows(a, s), rg))
    }

    // ---- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(DiffError::InvalidShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                reason: "expected a matrix",
            });
        }
        let t = ta.transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(DiffError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs",
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidShape {
                op: "concat",
                shape: base,
                reason: "axis out of range",
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: s,
                reason: "slice out of range",
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "outer",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (ta.numel(), tb.numel());
        let mut out = Vec::with_capacity(m * n);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x * y));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Outer(a, b), rg))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = linalg::square_order("diag", ta)?;
        let d: Vec<f64> = (0..n).map(|i| ta.data()[i * n + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n], d), Op::Diag(a), rg))
    }

    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(DiffError::InvalidShape {
                op: "diag_embed",
                shape: ta.shape().to_vec(),
                reason: "expected a vector",
            });
        }
        let t = Tensor::diag_matrix(ta.data());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::DiagEmbed(a), rg))
    }

    /// Lower Cholesky factor of the symmetric part of `a` (with jitter).
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(l, Op::Cholesky(a), rg))
    }

    /// General matrix inverse by pivoted elimination, without jitter.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let inv = linalg::inverse(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(inv, Op::Inverse(a), rg))
    }

    /// Solves `L X = B`, or `L^T X = B` when `transpose`, reading only the lower triangle of `L`.
    pub fn trisolve(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        let (tl, tb) = (self.value(l), self.value(b));
        let n = linalg::square_order("trisolve", tl)?;
        if tb.rank() != 2 || tb.rows() != n {
            return Err(DiffError::ShapeMismatch {
                op: "trisolve",
                lhs: tl.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let k = tb.cols();
        let x = if transpose {
            linalg::solve_lower_transposed(tl.data(), tb.data(), n, k)
        } else {
            linalg::solve_lower(tl.data(), tb.data(), n, k)
        };
        let rg = self.rg(&[l, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, k], x),
            Op::TriSolve { l, b, transpose },
            rg,
        ))
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    /// Sum over the last axis: `[m, n] -> [m]`, `[n] -> [1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (rows, n, shape) = last_axis("sum_last", self.value(a))?;
        let d = self.value(a).data();
        let out: Vec<f64> = (0..rows)
            .map(|i| d[i * n..(i + 1) * n].iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumLast(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, n, _) = last_axis("softmax", ta)?;
        let mut out = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Log-sum-exp over the last axis: `[m, n] -> [m]`, `[n] -> [1]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, n, shape) = last_axis("logsumexp", ta)?;
        let d = ta.data();
        let out: Vec<f64> = (0..rows)
            .map(|r| logsumexp_slice(&d[r * n..(r + 1) * n]))
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSumExp(a), rg))
    }

    // ---- elementwise unary -------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Log-density of `x` under independent Gaussians with the given mean and variance.
    ///
    /// `x` is `[m, n]` or `[n]`; `mean` and `var` match it or broadcast over the
    /// leading dimension. Output is `[m]` (or `[1]` for vector input).
    pub fn gaussian_logpdf_diag(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let (tx, tm, tv) = (self.value(x), self.value(mean), self.value(var));
        let (rows, n, shape) = last_axis("gaussian_logpdf_diag", tx)?;
        for (other, name) in [
            (tm, "gaussian_logpdf_diag(mean)"),
            (tv, "gaussian_logpdf_diag(var)"),
        ] {
            if broadcast_kind(name, tx.shape(), other.shape())? == Broadcast::Lhs {
                return Err(DiffError::ShapeMismatch {
                    op: name,
                    lhs: tx.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        let (xd, md, vd) = (tx.data(), tm.data(), tv.data());
        let (pm, pv) = (md.len(), vd.len());
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                let mut acc = 0.0;
                for j in 0..n {
                    let i = r * n + j;
                    let v = vd[i % pv];
                    let d = xd[i] - md[i % pm];
                    acc += -0.5 * (d * d / v + v.ln() + ln2pi);
                }
                acc
            })
            .collect();
        let rg = self.rg(&[x, mean, var]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GaussDiag { x, mean, var },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        if loss.id() >= self.nodes.len() {
            return Err(DiffError::UnknownNode(loss.id()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Tensor::from_parts(lv.shape().to_vec(), vec![1.0]);
        let grads = self.pullback(loss, seed)?;
        self.consumed = true;
        Ok(grads)
    }

    /// Vector-Jacobian product of `output` with `seed`. Does not consume the tape.
    pub fn pullback(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if output.id() >= self.nodes.len() {
            return Err(DiffError::UnknownNode(output.id()));
        }
        if seed.shape() != self.shape(output) {
            return Err(DiffError::ShapeMismatch {
                op: "pullback",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id() + 1];
        if self.requires_grad(output) {
            grads[output.id()] = Some(seed);
        }
        for id in (0..=output.id()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.id()].requires_grad {
            return;
        }
        debug_assert_eq!(
            g.shape(),
            self.shape(v),
            "gradient shape for node {}",
            v.id()
        );
        match &mut grads[v.id()] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Folds `g` (shaped like the broadcast result) back onto `v`'s shape.
    fn reduce_to(&self, v: Var, g: Tensor) -> Tensor {
        let target = self.value(v);
        if target.shape() == g.shape() {
            return g;
        }
        let p = target.numel();
        let mut out = vec![0.0; p];
        for (i, x) in g.data().iter().enumerate() {
            out[i % p] += x;
        }
        Tensor::from_parts(target.shape().to_vec(), out)
    }

    /// Expands `v`'s value to the result shape of a broadcast op.
    fn expand(&self, v: Var, shape: &[usize]) -> Vec<f64> {
        let t = self.value(v);
        let n: usize = shape.iter().product();
        if t.numel() == n {
            return t.data().to_vec();
        }
        let p = t.numel();
        (0..n).map(|i| t.data()[i % p]).collect()
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let shape = out.shape().to_vec();
        let gd = g.data();
        let like = |data: Vec<f64>| Tensor::from_parts(shape.clone(), data);
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.expand(*b, &shape);
                    let ga = like(gd.iter().zip(&bv).map(|(x, y)| x * y).collect());
                    self.accumulate(grads, *a, self.reduce_to(*a, ga));
                }
                if self.requires_grad(*b) {
                    let av = self.expand(*a, &shape);
                    let gb = like(gd.iter().zip(&av).map(|(x, y)| x * y).collect());
                    self.accumulate(grads, *b, self.reduce_to(*b, gb));
                }
            }
            Op::Div(a, b) => {
                let bv = self.expand(*b, &shape);
                if self.requires_grad(*a) {
                    let ga = like(gd.iter().zip(&bv).map(|(x, y)| x / y).collect());
                    self.accumulate(grads, *a, self.reduce_to(*a, ga));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let gb = like(
                        gd.iter()
                            .zip(out.data())
                            .zip(&bv)
                            .map(|((x, o), y)| -x * o / y)
                            .collect(),
                    );
                    self.accumulate(grads, *b, self.reduce_to(*b, gb));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let (m, n) = (ta.rows(), ta.cols());
                if self.requires_grad(*a) {
                    let mut ga = gd.to_vec();
                    for i in 0..m {
                        let si = ts.data()[i];
                        ga[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= si);
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.requires_grad(*s) {
                    let gs: Vec<f64> = (0..m)
                        .map(|i| {
                            gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(ta.row_slice(i))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *s, Tensor::from_parts(ts.shape().to_vec(), gs));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(gd, tb.data(), m, n, k, &mut ga);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(ta.data(), gd, m, k, n, &mut gb);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(s, gd.to_vec()));
            }
            Op::Concat(parts, axis) => {
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let w = ps[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(ps, gp));
                    }
                    offset += w;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = shape[*axis];
                let mut gi = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::from_parts(s, gi));
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), gd[0] / t.numel() as f64));
            }
            Op::SumLast(a) => {
                let t = self.value(*a);
                let n = t.shape()[t.rank() - 1];
                let ga: Vec<f64> = (0..t.numel()).map(|i| gd[i / n]).collect();
                self.accumulate(grads, *a, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Sigmoid(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s));
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t));
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Exp(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, e)| g * e);
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(g, x)| g / x);
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x));
                self.accumulate(grads, *a, like(ga.collect()));
            }
            Op::Softmax(a) => {
                let n = shape[shape.len() - 1];
                let s = out.data();
                let mut ga = vec![0.0; s.len()];
                for r in 0..s.len() / n {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = gd[row.clone()]
                        .iter()
                        .zip(&s[row.clone()])
                        .map(|(g, s)| g * s)
                        .sum();
                    for i in row {
                        ga[i] = s[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *a, like(ga));
            }
            Op::LogSumExp(a) => {
                let t = self.value(*a);
                let n = t.shape()[t.rank() - 1];
                let x = t.data();
                let lse = out.data();
                let ga: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let r = i / n;
                        if lse[r] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            gd[r] * (x[i] - lse[r]).exp()
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::Outer(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (ta.numel(), tb.numel());
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = (0..m)
                        .map(|i| (0..n).map(|j| gd[i * n + j] * tb.data()[j]).sum())
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m], ga));
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = (0..n)
                        .map(|j| (0..m).map(|i| gd[i * n + j] * ta.data()[i]).sum())
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n], gb));
                }
            }
            Op::Diag(a) => {
                let n = gd.len();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = gd[i];
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![n, n], ga));
            }
            Op::DiagEmbed(a) => {
                let n = shape[0];
                let ga: Vec<f64> = (0..n).map(|i| gd[i * n + i]).collect();
                self.accumulate(grads, *a, Tensor::from_parts(vec![n], ga));
            }
            Op::Cholesky(a) => {
                let n = shape[0];
                let l = out.data();
                // P = Phi(L^T Lbar): lower triangle with halved diagonal.
                let mut p = vec![0.0; n * n];
                matmul_tn_acc(l, gd, n, n, n, &mut p);
                for i in 0..n {
                    for j in 0..n {
                        if j > i {
                            p[i * n + j] = 0.0;
                        } else if i == j {
                            p[i * n + j] *= 0.5;
                        }
                    }
                }
                // S = L^{-T} P L^{-1}
                let y = linalg::solve_lower_transposed(l, &p, n, n);
                let yt = Tensor::from_parts(vec![n, n], y).transpose();
                let st = linalg::solve_lower_transposed(l, yt.data(), n, n);
                let ga = linalg::symmetric_part(&st, n);
                self.accumulate(grads, *a, Tensor::from_parts(vec![n, n], ga));
            }
            Op::Inverse(a) => {
                // Abar = -Y^T Ybar Y^T
                let yt = out.transpose();
                let n = shape[0];
                let mut left = vec![0.0; n * n];
                matmul_into(yt.data(), gd, n, n, n, &mut left);
                let mut ga = vec![0.0; n * n];
                matmul_into(&left, yt.data(), n, n, n, &mut ga);
                ga.iter_mut().for_each(|v| *v = -*v);
                let ga = Tensor::from_parts(vec![n, n], ga);
                self.accumulate(grads, *a, ga);
            }
            Op::TriSolve { l, b, transpose } => {
                let tl = self.value(*l);
                let n = tl.rows();
                let k = shape[1];
                let x = out.data();
                // Bbar = L^{-T} Xbar (or L^{-1} Xbar for the transposed solve).
                let gb = if *transpose {
                    linalg::solve_lower(tl.data(), gd, n, k)
                } else {
                    linalg::solve_lower_transposed(tl.data(), gd, n, k)
                };
                if self.requires_grad(*l) {
                    let mut gl = vec![0.0; n * n];
                    if *transpose {
                        // Lbar = -X Bbar^T, lower part
                        matmul_nt_acc(x, &gb, n, k, n, &mut gl);
                    } else {
                        // Lbar = -Bbar X^T, lower part
                        matmul_nt_acc(&gb, x, n, k, n, &mut gl);
                    }
                    for i in 0..n {
                        for j in 0..n {
                            gl[i * n + j] = if j > i { 0.0 } else { -gl[i * n + j] };
                        }
                    }
                    self.accumulate(grads, *l, Tensor::from_parts(vec![n, n], gl));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], gb));
                }
            }
            Op::GaussDiag { x, mean, var } => {
                let (tx, tm, tv) = (self.value(*x), self.value(*mean), self.value(*var));
                let xs = tx.shape().to_vec();
                let n = xs[xs.len() - 1];
                let (xd, md, vd) = (tx.data(), tm.data(), tv.data());
                let (pm, pv) = (md.len(), vd.len());
                let total = xd.len();
                let mut gx = vec![0.0; total];
                let mut gv = vec![0.0; total];
                for i in 0..total {
                    let gr = gd[i / n];
                    let v = vd[i % pv];
                    let d = xd[i] - md[i % pm];
                    gx[i] = -gr * d / v;
                    gv[i] = gr * 0.5 * (d * d / (v * v) - 1.0 / v);
                }
                if self.requires_grad(*mean) {
                    let gm = Tensor::from_parts(xs.clone(), gx.iter().map(|x| -x).collect());
                    self.accumulate(grads, *mean, self.reduce_to(*mean, gm));
                }
                if self.requires_grad(*var) {
                    let gvt = Tensor::from_parts(xs.clone(), gv);
                    self.accumulate(grads, *var, self.reduce_to(*var, gvt));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, gx));
            }
        }
    }
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
    match t.shape() {
        [n] => Ok((1, *n, vec![1])),
        [m, n] => Ok((*m, *n, vec![*m])),
        s => Err(DiffError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected rank 1 or 2",
        }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
