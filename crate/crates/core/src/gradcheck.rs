//! Central finite-difference oracle for [`Graph::backward`].

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively,
/// since the finite-difference roundoff floor is around `1e-11 * |f|`.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst coordinate of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

impl CheckReport {
    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        self.coords += 1;
        let e = relative_error(analytic, numeric);
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((name.to_string(), i));
        }
    }
}

/// Compare the tape gradient of a scalar function of one tensor against
/// central differences. `f` records the function onto the graph it is given.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let v = g.leaf("x", x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.get("x").expect("x leaf registered");

    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, analytic.data()[i], (up - down) / (2.0 * step));
    }
    Ok(report.max_rel_error)
}

/// Same comparison over every coordinate of every parameter in a store.
/// `f` builds the scalar loss from the store's parameters.
pub fn check_params<F>(f: F, params: &ParamStore, step: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let grads = g.backward(out)?;

    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.require(&name)?.len();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(&name).unwrap().shape()));
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = {
                let mut g = Graph::new();
                let o = f(&mut g, &probe)?;
                g.value(o).item()
            };
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = {
                let mut g = Graph::new();
                let o = f(&mut g, &probe)?;
                g.value(o).item()
            };
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            report.record(&name, i, analytic.data()[i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.7, 2.2, 0.0, 5.0]);
        let err = finite_difference_check(
            |g, v| {
                let sq = g.square(v);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_of_swish() {
        let x = Tensor::from_vec(vec![-3.0, -0.5, 0.1, 0.9, 2.5, 7.0]);
        let err = finite_difference_check(
            |g, v| {
                let s = g.swish(v);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the detached branch is invisible to backward but not to the probe
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |g, v| {
                let d = g.detach(v);
                let sq = g.square(d);
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
