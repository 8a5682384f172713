//! The residual-cell primitives as plain tensor functions.
//!
//! Each function records onto a throwaway [`Graph`], so the values here are
//! exactly what the differentiable model path computes.

use crate::autodiff::{BatchStats, BnMode, Graph};
use crate::error::{DvaError, Result};
use crate::tensor::Tensor;

/// Running statistics carried between batch-norm applications.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub fn swish(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.swish(v);
    g.value(y).clone()
}

/// Batch normalization over a `[batch, channel, time]` tensor. Train mode
/// normalizes with batch statistics and folds them into `stats`; infer mode
/// reads `stats` and leaves it untouched.
pub fn batch_norm(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(Tensor::from_vec(scale.to_vec()));
    let bv = g.constant(Tensor::from_vec(shift.to_vec()));
    let bn_mode = match mode {
        Mode::Train => BnMode::Train,
        Mode::Infer => BnMode::Infer {
            mean: &stats.mean,
            var: &stats.var,
        },
    };
    let (y, batch) = g.batch_norm(xv, gv, bv, bn_mode)?;
    if let Some(batch) = batch {
        stats.update(&batch);
    }
    Ok(g.value(y).clone())
}

pub fn conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernel.clone());
    let y = g.conv1d(xv, kv, 1)?;
    Ok(g.value(y).clone())
}

/// Per-channel convolution with `depth_kernel: [c, 1, k]` then a 1x1
/// channel mix with `point_kernel: [c_out, c, 1]`.
pub fn depthwise_separable_conv1d(
    x: &Tensor,
    depth_kernel: &Tensor,
    point_kernel: &Tensor,
) -> Result<Tensor> {
    let (_, c, _) = x.dims3()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let dk = g.constant(depth_kernel.clone());
    let pk = g.constant(point_kernel.clone());
    let d = g.conv1d(xv, dk, c)?;
    let y = g.conv1d(d, pk, 1)?;
    Ok(g.value(y).clone())
}

/// Squeeze-and-excitation: `x * sigmoid(w2 relu(w1 mean_t(x)))` per channel.
pub fn se_gate(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let (_, c, _) = x.dims3()?;
    let (cr, c1) = w1.dims2()?;
    let (c2, cr2) = w2.dims2()?;
    if cr == 0 || c1 != c || c2 != c || cr2 != cr {
        return Err(DvaError::contract(format!(
            "se_gate weights {:?}/{:?} do not fit {c} channels",
            w1.shape(),
            w2.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w1v = g.constant(w1.clone());
    let w2v = g.constant(w2.clone());
    let y = se_block(&mut g, xv, w1v, w2v)?;
    Ok(g.value(y).clone())
}

/// Graph form of [`se_gate`], shared with the model.
pub fn se_block(
    g: &mut Graph,
    x: crate::autodiff::Var,
    w1: crate::autodiff::Var,
    w2: crate::autodiff::Var,
) -> Result<crate::autodiff::Var> {
    let s = g.mean_time(x)?;
    let h = g.matmul_t(s, w1)?;
    let h = g.relu(h);
    let e = g.matmul_t(h, w2)?;
    let gate = g.sigmoid(e);
    g.channel_scale(x, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t3(b: usize, c: usize, t: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c, t], data).unwrap()
    }

    #[test]
    fn swish_values() {
        let y = swish(&Tensor::from_vec(vec![0.0, 20.0, 1.0]));
        assert_eq!(y.data()[0], 0.0);
        assert_abs_diff_eq!(y.data()[1], 20.0, epsilon = 1e-6);
        // 1 / (1 + e^-1)
        assert_abs_diff_eq!(y.data()[2], 0.731_058_578_630_004_9, epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let x = t3(2, 1, 3, vec![4.0; 6]);
        let mut stats = RunningStats::new(1);
        let y = batch_norm(&x, &[1.0], &[0.0], &mut stats, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_two_values() {
        let x = t3(2, 1, 1, vec![1.0, 3.0]);
        let mut stats = RunningStats::new(1);
        let y = batch_norm(&x, &[1.0], &[0.0], &mut stats, Mode::Train).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-4);
        // momentum 0.9 toward batch mean 2, var 1
        assert_abs_diff_eq!(stats.mean[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.var[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_infer_is_frozen() {
        let x = t3(1, 2, 3, vec![0.5, -1.0, 2.0, 3.0, 1.0, 0.0]);
        let mut stats = RunningStats {
            mean: vec![0.3, 1.0],
            var: vec![2.0, 0.5],
        };
        let before = stats.clone();
        let a = batch_norm(&x, &[1.5, 0.5], &[0.1, -0.2], &mut stats, Mode::Infer).unwrap();
        let b = batch_norm(&x, &[1.5, 0.5], &[0.1, -0.2], &mut stats, Mode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats, before);
    }

    #[test]
    fn conv1d_examples() {
        let x = t3(1, 1, 3, vec![1.0, 2.0, 3.0]);
        let id = t3(1, 1, 1, vec![1.0]);
        assert_eq!(conv1d(&x, &id).unwrap(), x);

        let k = t3(1, 1, 3, vec![0.0, 1.0, 1.0]);
        assert_eq!(conv1d(&x, &k).unwrap().data(), &[3.0, 5.0, 3.0]);

        let zero = t3(1, 1, 3, vec![0.0; 3]);
        assert!(conv1d(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_shape_mismatch() {
        let x = t3(1, 2, 3, vec![0.0; 6]);
        let k = t3(1, 3, 3, vec![0.0; 9]);
        assert!(matches!(conv1d(&x, &k), Err(DvaError::Contract(_))));
    }

    #[test]
    fn depthwise_single_channel_matches_conv() {
        let x = t3(1, 1, 4, vec![1.0, -2.0, 0.5, 3.0]);
        let dk = t3(1, 1, 3, vec![0.2, 0.7, -0.4]);
        let pk = t3(1, 1, 1, vec![1.0]);
        assert_eq!(
            depthwise_separable_conv1d(&x, &dk, &pk).unwrap(),
            conv1d(&x, &dk).unwrap()
        );
    }

    #[test]
    fn depthwise_identity_then_mix() {
        let x = t3(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dk = t3(2, 1, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        // M = [[1, 2], [-1, 0.5]]
        let pk = t3(2, 2, 1, vec![1.0, 2.0, -1.0, 0.5]);
        let y = depthwise_separable_conv1d(&x, &dk, &pk).unwrap();
        assert_eq!(y.data(), &[9.0, 12.0, 15.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn depthwise_has_fewer_parameters() {
        for (c, c_out, k) in [(2, 2, 3), (16, 16, 3), (8, 32, 5)] {
            assert!(c * k + c_out * c < c_out * c * k);
        }
    }

    #[test]
    fn se_gate_zero_excitation_halves() {
        let x = t3(2, 3, 4, (0..24).map(|i| i as f64 * 0.3 - 2.0).collect());
        let w1 = Tensor::new(vec![2, 3], vec![0.5, -0.1, 0.3, 0.2, 0.9, -0.7]).unwrap();
        let w2 = Tensor::zeros(&[3, 2]);
        let y = se_gate(&x, &w1, &w2).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*a, b / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn se_gate_range() {
        let x = t3(1, 2, 3, vec![1.0, 2.0, 3.0, -1.0, 4.0, 0.5]);
        let w1 = Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap();
        let w2 = Tensor::new(vec![2, 1], vec![5.0, -5.0]).unwrap();
        let y = se_gate(&x, &w1, &w2).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            let ratio = a / b;
            assert!(ratio > 0.0 && ratio < 1.0);
        }
    }
}
