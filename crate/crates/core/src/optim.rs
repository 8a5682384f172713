use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{DvaError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            if g.shape() != p.shape() {
                return Err(DvaError::contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let denom = v_hat.sqrt() + self.eps;
                if denom > 0.0 {
                    *pi -= self.lr * m_hat / denom;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![value]));
        p
    }

    fn grad(value: f64) -> Gradients {
        let mut g = Gradients::default();
        g.by_name.insert("w".into(), Tensor::from_vec(vec![value]));
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(5e-4);
        adam.update(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(5e-4);
        adam.update(&mut p, &grad(1.0)).unwrap();
        // m_hat / sqrt(v_hat) = 1 up to eps
        assert_abs_diff_eq!(p.get("w").unwrap().data()[0], -5e-4, epsilon = 1e-11);
    }

    #[test]
    fn first_step_opposes_gradient_sign() {
        for g in [-3.0, -1e-6, 2e-3, 50.0] {
            let mut p = single(1.0);
            let mut adam = AdamState::new(1e-3);
            adam.update(&mut p, &grad(g)).unwrap();
            let delta = p.get("w").unwrap().data()[0] - 1.0;
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn scaled_gradient_stream_gives_same_updates_without_eps() {
        let stream = [0.3, -1.2, 0.8, 0.05, -0.4, 2.0];
        let run = |c: f64| {
            let mut p = single(0.0);
            let mut adam = AdamState::new(1e-2);
            adam.eps = 0.0;
            let mut trace = Vec::new();
            for g in stream {
                adam.update(&mut p, &grad(c * g)).unwrap();
                trace.push(p.get("w").unwrap().data()[0]);
            }
            trace
        };
        let base = run(1.0);
        for c in [1e-3, 0.5, 7.0, 1e4] {
            for (a, b) in run(c).iter().zip(&base) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn second_moment_nonnegative_and_step_counts() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(1e-3);
        for (i, g) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            adam.update(&mut p, &grad(g)).unwrap();
            assert_eq!(adam.step_count(), i as u64 + 1);
            assert!(adam.second_moment("w").unwrap().data()[0] >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = single(0.0);
        let mut g = Gradients::default();
        g.by_name.insert("w".into(), Tensor::zeros(&[2]));
        assert!(AdamState::new(1e-3).update(&mut p, &g).is_err());
    }
}
