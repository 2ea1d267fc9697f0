use alphanet::barra::*;
use proptest::prelude::*;

/// A random cross-section: industries cover every label in 0..p, caps are positive.
#[derive(Clone, Debug)]
struct Instance {
    industry: Vec<usize>,
    caps: Vec<f64>,
    styles: Vec<Vec<f64>>,
    returns: Vec<f64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (2usize..5, 0usize..4, 12usize..40).prop_flat_map(|(p, q, n)| {
        (
            prop::collection::vec(0..p, n),
            prop::collection::vec(1e8f64..5e10, n),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), q),
            prop::collection::vec(-0.1f64..0.1, n),
        )
            .prop_map(move |(mut industry, caps, styles, returns)| {
                for k in 0..p {
                    industry[k] = k;
                }
                Instance {
                    industry,
                    caps,
                    styles,
                    returns,
                }
            })
    })
}

fn exposures(inst: &Instance) -> ExposureMatrix {
    let ids = (0..inst.caps.len()).map(|i| format!("S{i}")).collect();
    let styles = inst
        .styles
        .iter()
        .enumerate()
        .map(|(q, c)| {
            let mut c = c.clone();
            standardize_exposures(&mut c, &inst.caps);
            (format!("style{q}"), c)
        })
        .collect();
    ExposureMatrix::new(0, ids, &inst.industry, inst.caps.clone(), styles).unwrap()
}

proptest! {
    #[test]
    fn fit_satisfies_the_constraint_and_decomposes(inst in instance()) {
        let x = exposures(&inst);
        let fit = cross_sectional_regression(&inst.returns, &x).unwrap();
        let shares = x.industry_shares();
        let constraint: f64 = shares.iter().zip(fit.industry()).map(|(w, f)| w * f).sum();
        prop_assert!(constraint.abs() < 1e-12, "Σ w_p f_p = {constraint}");
        for i in 0..x.n_stocks() {
            let fitted: f64 = (0..x.values.ncols()).map(|c| x.values[[i, c]] * fit.values[c]).sum();
            prop_assert!((fitted + fit.residuals[i] - inst.returns[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_are_weighted_orthogonal(inst in instance()) {
        let x = exposures(&inst);
        let fit = cross_sectional_regression(&inst.returns, &x).unwrap();
        let v = x.regression_weights();
        let total: f64 = v.iter().sum();
        for c in 0..x.values.ncols() {
            let cov: f64 = (0..x.n_stocks()).map(|i| v[i] * x.values[[i, c]] * fit.residuals[i]).sum::<f64>() / total;
            prop_assert!(cov.abs() < 1e-12, "column {} has weighted covariance {cov}", x.factor_names[c]);
        }
    }

    #[test]
    fn projector_reproduces_residuals(inst in instance()) {
        let x = exposures(&inst);
        let fit = cross_sectional_regression(&inst.returns, &x).unwrap();
        let p = residual_projector(&x).unwrap();
        let y = ndarray::Array1::from(inst.returns.clone());
        let u = p.dot(&y);
        for (a, b) in u.iter().zip(&fit.residuals) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardization_holds_and_is_idempotent(
        col in prop::collection::vec(-10.0f64..10.0, 3..50),
        seed in any::<u64>(),
    ) {
        let caps: Vec<f64> = (0..col.len()).map(|i| 1.0 + ((seed.wrapping_add(i as u64 * 7919)) % 1000) as f64).collect();
        let mut once = col.clone();
        prop_assume!(standardize_exposures(&mut once, &caps));
        let n = once.len() as f64;
        let wmean = once.iter().zip(&caps).map(|(x, w)| x * w).sum::<f64>() / caps.iter().sum::<f64>();
        let mean = once.iter().sum::<f64>() / n;
        let sd = (once.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(wmean.abs() < 1e-12);
        prop_assert!((sd - 1.0).abs() < 1e-12);
        let mut twice = once.clone();
        standardize_exposures(&mut twice, &caps);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Returns generated exactly by exposures and a constraint-satisfying f* are
    /// explained with zero residual.
    #[test]
    fn exact_factor_returns_are_recovered(inst in instance(), raw in prop::collection::vec(-0.05f64..0.05, 12)) {
        let x = exposures(&inst);
        let k = x.values.ncols();
        let p = x.n_industries();
        let mut f: Vec<f64> = raw.iter().cycle().take(k).copied().collect();
        let shares = x.industry_shares();
        let excess: f64 = (0..p - 1).map(|j| shares[j] * f[1 + j]).sum();
        f[p] = -excess / shares[p - 1];
        let y: Vec<f64> = (0..x.n_stocks())
            .map(|i| (0..k).map(|c| x.values[[i, c]] * f[c]).sum())
            .collect();
        let fit = cross_sectional_regression(&y, &x).unwrap();
        for (a, b) in fit.values.iter().zip(&f) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        prop_assert!(fit.residuals.iter().all(|u| u.abs() < 1e-12));
    }
}

#[test]
fn ewma_weights_halve_every_half_life() {
    for (n, h) in [(10, 3.0), (252, 63.0), (504, 126.0)] {
        let w = ewma_weights(n, h);
        assert_eq!(w.len(), n);
        assert_eq!(w[n - 1], 1.0);
        assert!(w.windows(2).all(|p| p[0] <= p[1]), "newest observation weighs most");
        assert!((w[n - 1 - h as usize] / w[n - 1] - 0.5).abs() < 1e-9);
    }
}
