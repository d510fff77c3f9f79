use crate::error::{DiffError, Result};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    /// Per-parameter learning-rate multiplier.
    pub lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
            lr_scale: vec![1.0; store.len()],
        }
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.0] = scale;
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left alone.
    ///
    /// The whole step is rejected, leaving parameters and moments untouched, if any
    /// gradient is non-finite or misshapen.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                let p = store.get(id);
                if g.shape() != p.shape() {
                    return Err(DiffError::GradientShape {
                        name: store.name(id).to_string(),
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(DiffError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let step_lr = lr * self.lr_scale[id.0];
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= step_lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = single(1.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = GradBuffer::new(&s);
        g.add(id, &Tensor::scalar(0.0));
        for _ in 0..10 {
            st.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; mhat = 1, vhat = 1 -> delta = lr / (1 + eps).
        let (mut s, id) = single(0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        let mut g = GradBuffer::new(&s);
        g.add(id, &Tensor::scalar(1.0));
        st.step(&mut s, &g).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut s, id) = single(0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..1000 {
            let w = s.get(id).item();
            let mut g = GradBuffer::new(&s);
            g.add(id, &Tensor::scalar(2.0 * (w - 3.0)));
            st.step(&mut s, &g).unwrap();
        }
        assert!(
            (s.get(id).item() - 3.0).abs() < 1e-3,
            "{}",
            s.get(id).item()
        );
    }

    #[test]
    fn nan_gradient_rejected_with_name() {
        let (mut s, id) = single(2.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut g = GradBuffer::new(&s);
        g.add(id, &Tensor::scalar(f64::NAN));
        let err = st.step(&mut s, &g).unwrap_err();
        assert_eq!(err, DiffError::NonFiniteGradient("w".into()));
        assert_eq!(s.get(id).item(), 2.0);
        assert_eq!(st.step, 0);
    }
}
