//! Central finite-difference oracle for gradient checks.
//!
//! Evaluates a scalar function by re-running it on perturbed inputs; it never
//! touches the reverse-mode machinery it is used to validate.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * step);
    }
    Tensor::new(x.shape(), out).expect("same shape as input")
}

/// Central-difference directional derivative of `f` along `direction`.
pub fn directional_derivative(
    x: &[f64],
    direction: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let up: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a + step * d).collect();
    let down: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a - step * d).collect();
    (f(&up) - f(&down)) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`, applied norm-wise to slices.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
