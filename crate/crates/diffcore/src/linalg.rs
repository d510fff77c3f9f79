//! Value-level dense kernels shared by forward and backward passes.

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Jitter added to the diagonal before every factorization.
pub const CHOLESKY_JITTER: f64 = 1e-9;
/// Jitter used on the single retry after a failed factorization.
pub const CHOLESKY_RETRY_JITTER: f64 = 1e-6;

fn factor(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of the symmetric part of `a`, with jitter and one retry.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square_order("cholesky", a)?;
    let sym = symmetric_part(a.data(), n);
    factor(&sym, n, CHOLESKY_JITTER)
        .or_else(|| factor(&sym, n, CHOLESKY_RETRY_JITTER))
        .map(|l| Tensor::from_parts(vec![n, n], l))
        .ok_or(DiffError::NotPositiveDefinite {
            order: n,
            jitter: CHOLESKY_RETRY_JITTER,
        })
}

/// True when `a` factors without any jitter.
pub fn is_positive_definite(a: &Tensor) -> bool {
    match square_order("is_positive_definite", a) {
        Ok(n) => factor(&symmetric_part(a.data(), n), n, 0.0).is_some(),
        Err(_) => false,
    }
}

pub(crate) fn symmetric_part(a: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    s
}

pub(crate) fn square_order(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(DiffError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected a square matrix",
        }),
    }
}

/// Solves `L X = B` for lower-triangular `L` (`n x n`) and `B` (`n x k`).
pub fn solve_lower(l: &[f64], b: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for col in 0..k {
        for i in 0..n {
            let mut s = x[i * k + col];
            for p in 0..i {
                s -= l[i * n + p] * x[p * k + col];
            }
            x[i * k + col] = s / l[i * n + i];
        }
    }
    x
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &[f64], b: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for col in 0..k {
        for i in (0..n).rev() {
            let mut s = x[i * k + col];
            for p in (i + 1)..n {
                s -= l[p * n + i] * x[p * k + col];
            }
            x[i * k + col] = s / l[i * n + i];
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive definite `A` via Cholesky.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let n = l.rows();
    if b.rows() != n {
        return Err(DiffError::ShapeMismatch {
            op: "spd_solve",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = b.numel() / n;
    let y = solve_lower(l.data(), b.data(), n, k);
    let x = solve_lower_transposed(l.data(), &y, n, k);
    Ok(Tensor::from_parts(b.shape().to_vec(), x))
}

/// Plain Gauss-Jordan inverse with partial pivoting; used as an independent route in checks.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let n = square_order("inverse", a)?;
    let mut m = a.data().to_vec();
    let mut inv = Tensor::eye(n).into_data();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col] == 0.0 {
            return Err(DiffError::NotPositiveDefinite {
                order: n,
                jitter: 0.0,
            });
        }
        for j in 0..n {
            m.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[i * n + j] -= f * m[col * n + j];
                inv[i * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, n], inv))
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    if a.rank() != 2 || b.rank() != 2 || b.rows() != k {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    crate::tensor::matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_identity() {
        let l = cholesky(&Tensor::eye(3)).unwrap();
        let expect = (1.0f64 + CHOLESKY_JITTER).sqrt();
        for i in 0..3 {
            assert!((l.get2(i, i) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn cholesky_retries_with_larger_jitter() {
        // PSD but singular: needs jitter to factor.
        let a = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(!is_positive_definite(&a));
        assert!(cholesky(&a).is_ok());
        let neg = Tensor::matrix(1, 1, vec![-1.0]).unwrap();
        assert!(matches!(
            cholesky(&neg),
            Err(DiffError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn spd_solve_matches_inverse() {
        let a = Tensor::matrix(3, 3, vec![4., 1., 0.5, 1., 3., 0.2, 0.5, 0.2, 2.]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap();
        let x1 = spd_solve(&a, &b).unwrap();
        let x2 = matmul(&inverse(&a).unwrap(), &b).unwrap();
        assert!(x1.max_abs_diff(&x2) < 1e-8);
    }
}
