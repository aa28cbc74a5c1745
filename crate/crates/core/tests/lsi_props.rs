use proptest::prelude::*;
use schro_flow::lsi::{
    epsilon_c, f_and_g, fixed_point_alpha, ghat_from_lr, kappa_logconcave, rate_r, LsiParams, ProfileFn,
};
use schro_flow::model::UpperBound;

fn rhs(alpha_marginal: f64, beta: UpperBound, ghat: ProfileFn, eps: f64, a: f64) -> f64 {
    let fg = f_and_g(beta, ProfileFn::Zero, ghat, a, eps).unwrap();
    alpha_marginal - 1.0 / eps + fg.g_inv(2.0) / (2.0 * eps * eps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rate_positive_iff_condition(kx in 0.01f64..20.0, ky in 0.01f64..20.0, eps in 0.01f64..20.0) {
        let rep = rate_r(&LsiParams { kappa_x_given_y: kx, kappa_y_given_x: ky, epsilon: eps }).unwrap();
        let cond = (kx * ky).sqrt() * eps > 2.0;
        prop_assert_eq!(rep.r > 0.0, cond && rep.condition_met);
        if !cond {
            prop_assert_eq!(rep.r, 0.0);
        }
        prop_assert!(rep.r >= 0.0);
    }

    #[test]
    fn boundary_rate_is_zero(kx in 0.1f64..10.0, ky in 0.1f64..10.0) {
        let eps = 2.0 / (kx * ky).sqrt();
        let rep = rate_r(&LsiParams { kappa_x_given_y: kx, kappa_y_given_x: ky, epsilon: eps }).unwrap();
        prop_assert!(rep.r.abs() < 1e-9 * eps * (kx + ky));
    }

    #[test]
    fn epsilon_c_sign(au in 0.1f64..5.0, av in 0.1f64..5.0, fu in 1.0f64..10.0, fv in 1.0f64..10.0, gauss_u: bool, gauss_v: bool) {
        let bu = if gauss_u { au } else { au * fu };
        let bv = if gauss_v { av } else { av * fv };
        let ec = epsilon_c(au, av, UpperBound::Finite(bu), UpperBound::Finite(bv)).unwrap();
        prop_assert!(ec >= 0.0);
        let gaussian = bu == au && bv == av;
        prop_assert_eq!(ec == 0.0, gaussian || ec.abs() < 1e-15, "eps_c {} for bu/au {} bv/av {}", ec, bu / au, bv / av);
        if !gaussian {
            prop_assert!(ec > 0.0 || (bu / au - 1.0).abs() < 1e-12 && (bv / av - 1.0).abs() < 1e-12);
        }
        let ec_inf = epsilon_c(au, av, UpperBound::Unbounded, UpperBound::Unbounded).unwrap();
        prop_assert!((ec_inf - (au * av).powf(-0.5)).abs() < 1e-12 * ec_inf);
    }

    #[test]
    fn gaussian_rate_positive_for_all_eps(a in 0.05f64..10.0, b in 0.05f64..10.0, eps in 1e-3f64..50.0) {
        let kx = kappa_logconcave(a, UpperBound::Finite(b), eps).unwrap();
        let ky = kappa_logconcave(b, UpperBound::Finite(a), eps).unwrap();
        let rep = rate_r(&LsiParams { kappa_x_given_y: kx, kappa_y_given_x: ky, epsilon: eps }).unwrap();
        prop_assert!(rep.r > 0.0, "r = {} at a={a} b={b} eps={eps}", rep.r);
    }

    #[test]
    fn fixed_point_residual_and_minimality(
        alpha in 0.2f64..5.0,
        beta in 0.5f64..20.0,
        l in 0.0f64..3.0,
        r in 0.0f64..2.0,
        eps in 0.2f64..5.0,
    ) {
        let ghat = ghat_from_lr(l, r).unwrap();
        let beta = UpperBound::Finite(beta);
        let fp = fixed_point_alpha(alpha, beta, ProfileFn::Zero, ghat, eps).unwrap();
        let resid = (fp.alpha - rhs(alpha, beta, ghat, eps, fp.alpha)).abs();
        prop_assert!(resid < 1e-9, "residual {resid}");
        prop_assert!(fp.residual < 1e-9);

        let left = alpha - 1.0 / eps;
        let upper = left + beta.recip() / (eps * eps);
        prop_assert!(fp.alpha >= left - 1e-12 * left.abs().max(1.0));
        prop_assert_eq!(fp.in_bracket, fp.alpha > left - f64::EPSILON * left.abs() && fp.alpha <= upper);
        // No smaller fixed point: rhs(a) > a strictly below the returned value.
        for k in 0..8 {
            let a = left + (fp.alpha - left) * k as f64 / 8.0;
            if fp.alpha - a > 1e-9 * fp.alpha.abs().max(1.0) {
                prop_assert!(rhs(alpha, beta, ghat, eps, a) - a > -1e-12, "earlier fixed point near {a}");
            }
        }
    }
}
