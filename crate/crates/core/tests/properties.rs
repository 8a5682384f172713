use dva_core::evaluation::{aggregate, StockRunResult};
use dva_core::model::kl_gaussian;
use dva_core::portfolio::{
    glasso_kkt_residual, graphical_lasso, mean_variance_weights, mv_objective, project_simplex, sharpe,
    GLASSO_JITTER,
};
use dva_core::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn t(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

fn spd(entries: &[f64], n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_column_slice(n, n, &entries[..n * n]);
    &a * a.transpose() + DMatrix::identity(n, n) * ridge
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_kl_is_nonnegative(
        v in prop::collection::vec((-3.0..3.0f64, -4.0..4.0f64, -3.0..3.0f64, -4.0..4.0f64), 1..12)
    ) {
        let (qm, qv, pm, pv) = v.iter().fold((vec![], vec![], vec![], vec![]), |mut acc, x| {
            acc.0.push(x.0);
            acc.1.push(x.1);
            acc.2.push(x.2);
            acc.3.push(x.3);
            acc
        });
        let kl = kl_gaussian(&t(qm.clone()), &t(qv.clone()), &t(pm), &t(pv)).unwrap();
        prop_assert!(kl >= 0.0);
        let same = kl_gaussian(&t(qm.clone()), &t(qv.clone()), &t(qm), &t(qv)).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn simplex_projection_is_feasible(v in prop::collection::vec(-5.0..5.0f64, 1..10)) {
        let w = project_simplex(&v);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // already-feasible points are fixed
        prop_assert!(project_simplex(&w).iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn weights_beat_random_feasible_points(
        n in 2usize..6,
        mu in prop::collection::vec(-0.3..0.3f64, 6),
        a in prop::collection::vec(-1.0..1.0f64, 36),
        probes in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 6), 20),
        gamma in 0.2..20.0f64,
    ) {
        let mu = DVector::from_column_slice(&mu[..n]);
        let sigma = spd(&a, n, 0.05);
        let w = mean_variance_weights(&mu, &sigma, gamma).unwrap();
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let best = mv_objective(&w, &mu, &sigma, gamma);
        for p in probes {
            let total: f64 = p[..n].iter().sum::<f64>().max(1e-12);
            let q: Vec<f64> = p[..n].iter().map(|x| x / total).collect();
            prop_assert!(mv_objective(&q, &mu, &sigma, gamma) <= best + 1e-9);
        }
    }

    #[test]
    fn glasso_satisfies_kkt(n in 2usize..7, a in prop::collection::vec(-1.0..1.0f64, 49), lambda in 0.0..0.5f64) {
        let s = spd(&a, n, 0.01);
        let p = graphical_lasso(&s, lambda).unwrap();
        let jittered = &s + DMatrix::identity(n, n) * GLASSO_JITTER;
        prop_assert!(glasso_kkt_residual(&jittered, &p.theta, lambda).unwrap() < 1e-6);
        prop_assert!((&p.theta - p.theta.transpose()).abs().max() == 0.0);
        prop_assert!(p.theta.clone().cholesky().is_some());
        let cov = p.theta.clone().try_inverse().unwrap();
        for i in 0..n {
            prop_assert!((cov[(i, i)] - jittered[(i, i)]).abs() < 1e-6);
        }
    }

    #[test]
    fn sharpe_is_scale_invariant(r in prop::collection::vec(-0.05..0.05f64, 3..30), c in 0.1..10.0f64) {
        if let Ok(s) = sharpe(&r) {
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            prop_assert!((sharpe(&scaled).unwrap() - s).abs() < 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_ignores_input_order(mses in prop::collection::vec(0.0..1.0f64, 6), rot in 0usize..6) {
        let rows: Vec<StockRunResult> = mses
            .iter()
            .enumerate()
            .map(|(i, &mse)| StockRunResult { stock: ["A", "B"][i % 2].to_string(), run: i / 2, mse })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        prop_assert_eq!(aggregate(&rows).unwrap(), aggregate(&shuffled).unwrap());
    }
}
