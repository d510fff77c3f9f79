//! Differentiable helpers composed from primitive tape ops.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `(a + a^T) / 2`.
    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        let at = self.transpose(a)?;
        let s = self.add(a, at)?;
        Ok(self.scale(s, 0.5))
    }

    /// Repeats a `[1, n]` row (or `[n]` vector) `m` times into `[m, n]`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let n = self.value(a).numel();
        let row = if self.shape(a) == [1, n] {
            a
        } else {
            self.reshape(a, &[1, n])?
        };
        if m == 1 {
            return Ok(row);
        }
        let ones = self.constant(Tensor::ones(&[m, 1]));
        self.matmul(ones, row)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Solves `A X = B` for symmetric positive definite `A`.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = self.cholesky(a)?;
        let y = self.trisolve(l, b, false)?;
        self.trisolve(l, y, true)
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn spd_inverse(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        let eye = self.constant(Tensor::eye(n));
        let inv = self.spd_solve(a, eye)?;
        self.symmetrize(inv)
    }

    /// Log-density of a vector `x` (`[n]`) under `N(mean, cov)`. Returns `[1]`.
    pub fn gaussian_logpdf_full(&mut self, x: Var, mean: Var, cov: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if self.shape(mean) != self.shape(x) || self.shape(cov) != [n, n] {
            return Err(DiffError::ShapeMismatch {
                op: "gaussian_logpdf_full",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(cov).to_vec(),
            });
        }
        let l = self.cholesky(cov)?;
        let d = self.sub(x, mean)?;
        let d = self.reshape(d, &[n, 1])?;
        let y = self.trisolve(l, d, false)?;
        let quad = self.mul(y, y)?;
        let quad = self.sum(quad);
        let diag = self.diag(l)?;
        let logdiag = self.log(diag);
        let half_logdet = self.sum(logdiag);
        // -0.5 quad - 0.5 logdet - n/2 log(2 pi), with 0.5 logdet = sum log diag(L)
        let a = self.scale(quad, -0.5);
        let b = self.sub(a, half_logdet)?;
        Ok(self.shift(b, -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Identity matrix constant.
    pub fn eye(&mut self, n: usize) -> Var {
        self.constant(Tensor::eye(n))
    }
}
