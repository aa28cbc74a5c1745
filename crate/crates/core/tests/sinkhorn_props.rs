use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schro_flow::model::{CostSpec, PotentialSpec};
use schro_flow::sinkhorn::{
    fisher_grid, perturbed_coupling, projected_fisher_grid, relative_entropy, sinkhorn, sinkhorn_from, GridMeasure,
};

fn solve(offset: f64, var: f64, eps: f64, nodes: usize) -> schro_flow::sinkhorn::SinkhornSolution {
    let mu = GridMeasure::from_potential(&PotentialSpec::symmetric_mixture(offset), nodes).unwrap();
    let nu = GridMeasure::from_potential(&PotentialSpec::gaussian(nalgebra::DMatrix::from_element(1, 1, var)).unwrap(), nodes).unwrap();
    sinkhorn(&mu, &nu, &CostSpec::Quadratic, eps, 1e-12, 100_000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn residuals_nonincreasing(offset in 0.0f64..2.0, var in 0.3f64..3.0, eps in 0.2f64..3.0) {
        let sol = solve(offset, var, eps, 48);
        prop_assert!(sol.converged);
        for w in sol.residuals.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn marginals_and_gauge(offset in 0.0f64..2.0, var in 0.3f64..3.0, eps in 0.2f64..3.0, kappa in -50.0f64..50.0) {
        let sol = solve(offset, var, eps, 48);
        let (rows, cols) = sol.schrodinger_residuals();
        prop_assert!(rows.iter().chain(&cols).all(|r| r.abs() < 1e-10));
        let moved = sol.shifted(kappa);
        let diff = (&moved.coupling - &sol.coupling).amax();
        prop_assert!(diff < 1e-13, "gauge shift changed the coupling by {diff}");
    }

    #[test]
    fn initialisation_does_not_matter(offset in 0.0f64..2.0, eps in 0.3f64..3.0, psi in prop::collection::vec(-3.0f64..3.0, 40)) {
        let tol = 1e-12;
        let mu = GridMeasure::from_potential(&PotentialSpec::symmetric_mixture(offset), 40).unwrap();
        let nu = GridMeasure::from_potential(&PotentialSpec::standard_normal(1), 40).unwrap();
        let a = sinkhorn(&mu, &nu, &CostSpec::Quadratic, eps, tol, 100_000).unwrap();
        let b = sinkhorn_from(&mu, &nu, &CostSpec::Quadratic, eps, tol, 100_000, Some(&psi)).unwrap();
        prop_assert!(a.converged && b.converged);
        // Potentials are compared after fixing the additive gauge.
        let shift = b.phi[0] - a.phi[0];
        let b = b.shifted(-shift);
        let dphi = a.phi.iter().zip(&b.phi).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        let dpsi = a.psi.iter().zip(&b.psi).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        prop_assert!(dphi < 10.0 * tol * eps.max(1.0) * 40.0 && dpsi < 10.0 * tol * eps.max(1.0) * 40.0, "dphi {dphi} dpsi {dpsi}");
        prop_assert!((&a.coupling - &b.coupling).amax() < 10.0 * tol);
    }

    #[test]
    fn perturbed_couplings_have_nonnegative_functionals(seed in 0u64..10_000, amp in 0.0f64..1.0) {
        let sol = solve(1.0, 1.0, 1.0, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = perturbed_coupling(&sol, &mut rng, amp).unwrap();
        let h = relative_entropy(&p, &sol.coupling);
        let f = fisher_grid(&p, &sol).unwrap();
        let pf = projected_fisher_grid(&p, &sol).unwrap();
        prop_assert!(h >= -1e-14 && f >= 0.0 && pf >= 0.0);
        prop_assert!(pf <= f * (1.0 + 1e-12) + 1e-15, "projected {pf} above full {f}");
        let rows_ok = (0..p.nrows()).all(|i| (p.row(i).sum() - sol.coupling.row(i).sum()).abs() < 1e-13);
        prop_assert!(rows_ok);
    }
}
