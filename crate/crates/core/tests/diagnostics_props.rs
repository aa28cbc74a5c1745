use nalgebra::DMatrix;
use proptest::prelude::*;
use schro_flow::condexp::CondExpEstimator;
use schro_flow::diagnostics::{drift_discrepancy, ks_statistic, DriftReference};
use schro_flow::integrator::ParticleCloud;
use schro_flow::model::{sample_marginal, CostSpec, PotentialSpec, RngStream};
use schro_flow::points::Points;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ks_in_unit_interval_and_invariant_under_monotone_maps(xs in prop::collection::vec(-5.0f64..5.0, 1..200)) {
        let d = ks_statistic(&xs, logistic).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let e = ks_statistic(&ys, |y| if y > 0.0 { logistic(y.ln()) } else { 0.0 }).unwrap();
        prop_assert!((d - e).abs() < 1e-12, "{d} vs {e}");
        let zs: Vec<f64> = xs.iter().map(|x| x * x * x + x).collect();
        // Inverse of z = x^3 + x by Newton from z.
        let inv = |z: f64| {
            let mut x = z.cbrt();
            for _ in 0..60 {
                x -= (x * x * x + x - z) / (3.0 * x * x + 1.0);
            }
            x
        };
        let f = ks_statistic(&zs, |z| logistic(inv(z))).unwrap();
        prop_assert!((d - f).abs() < 1e-9, "{d} vs {f}");
    }

    #[test]
    fn discrepancy_vanishes_for_true_linear_fields(
        entries in prop::collection::vec(-1.0f64..1.0, 4),
        seed in 0u64..10_000,
    ) {
        let mut b = DMatrix::from_row_slice(2, 2, &entries);
        b += DMatrix::identity(2, 2) * 2.0;
        let binv = b.clone().try_inverse().unwrap();
        let xs = sample_marginal(&PotentialSpec::standard_normal(2), 500, RngStream::new(seed)).unwrap();
        let ys: Vec<Vec<f64>> = xs.rows().map(|x| (&b * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()).collect();
        let cloud = ParticleCloud::new(xs, Points::from_rows(&ys).unwrap(), 0.0).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        let reference = DriftReference::Linear { phi: &id - &b, psi: &id - &binv };
        let dd = drift_discrepancy(&cloud, &CostSpec::Quadratic, &CondExpEstimator::ExactLinear, &reference).unwrap();
        prop_assert!(dd.phi >= 0.0 && dd.psi >= 0.0);
        prop_assert!(dd.total() < 1e-20, "{:?}", dd);
    }

    #[test]
    fn discrepancy_nonnegative_for_wrong_fields(scale in -2.0f64..2.0, seed in 0u64..10_000) {
        let xs = sample_marginal(&PotentialSpec::standard_normal(1), 300, RngStream::new(seed)).unwrap();
        let ys = sample_marginal(&PotentialSpec::standard_normal(1), 300, RngStream::new(seed + 1)).unwrap();
        let cloud = ParticleCloud::new(xs, ys, 0.0).unwrap();
        let m = DMatrix::from_element(1, 1, scale);
        let reference = DriftReference::Linear { phi: m.clone(), psi: m };
        for est in [CondExpEstimator::ExactLinear, CondExpEstimator::Knn { k: 10 }, CondExpEstimator::Binning { bins: 8 }] {
            let dd = drift_discrepancy(&cloud, &CostSpec::Quadratic, &est, &reference).unwrap();
            prop_assert!(dd.phi >= 0.0 && dd.psi >= 0.0 && dd.total().is_finite());
        }
    }
}
