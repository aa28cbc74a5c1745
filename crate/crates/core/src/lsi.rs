//! Explicit constants for the projected log-Sobolev inequality: conditional
//! LSI constants, the exponential rate `r`, the critical regularisation and
//! the convexity-profile fixed points.

use crate::error::{invalid, Error, Result};
use crate::model::UpperBound;
use crate::numeric::bisect_increasing;

/// Bisection budget shared by every scalar root search.
pub const MAX_BISECTION: usize = 200;
pub const REL_TOL: f64 = 1e-10;
// The inner inverse inside the fixed-point map is resolved to machine
// precision so that the map itself is (numerically) continuous.
const INNER_REL_TOL: f64 = 1e-15;
const MAX_FIXED_POINT_ITER: usize = 10_000;
const FIXED_POINT_TOL: f64 = 1e-12;

/// Profile functions: `0` or the canonical `2 sqrt(L) tanh(r sqrt(L))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProfileFn {
    Zero,
    Tanh { l: f64 },
}

impl ProfileFn {
    pub fn canonical(l: f64) -> Self {
        if l == 0.0 {
            ProfileFn::Zero
        } else {
            ProfileFn::Tanh { l }
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            ProfileFn::Zero => 0.0,
            ProfileFn::Tanh { l } => {
                let s = l.sqrt();
                2.0 * s * (r * s).tanh()
            }
        }
    }

    /// Right derivative at zero.
    pub fn derivative_at_zero(&self) -> f64 {
        match *self {
            ProfileFn::Zero => 0.0,
            ProfileFn::Tanh { l } => 2.0 * l,
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            ProfileFn::Zero => 0.0,
            ProfileFn::Tanh { l } => l,
        }
    }
}

/// Lower bound `alpha - L` on the integrated convexity profile below distance
/// `R`, `alpha` beyond it, plus the Hessian upper bound `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexityProfile {
    pub alpha: f64,
    pub l: f64,
    pub r: f64,
    pub beta: UpperBound,
}

impl ConvexityProfile {
    pub fn new(alpha: f64, l: f64, r: f64, beta: UpperBound) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if !(l >= 0.0 && l.is_finite()) {
            return Err(invalid("L", format!("must be nonnegative, got {l}")));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(invalid("R", format!("must be nonnegative, got {r}")));
        }
        check_beta(beta)?;
        Ok(Self { alpha, l, r, beta })
    }

    /// Strongly log-concave marginal: `alpha I <= Hess W <= beta I`.
    pub fn log_concave(alpha: f64, beta: UpperBound) -> Result<Self> {
        Self::new(alpha, 0.0, 0.0, beta)
    }
}

fn check_beta(beta: UpperBound) -> Result<()> {
    match beta {
        UpperBound::Finite(b) if !(b > 0.0 && b.is_finite()) => {
            Err(invalid("beta", format!("must be positive, got {b}")))
        }
        _ => Ok(()),
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(invalid("epsilon", format!("must be positive, got {eps}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LsiParams {
    pub kappa_x_given_y: f64,
    pub kappa_y_given_x: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RateReport {
    pub kappa_x_given_y: f64,
    pub kappa_y_given_x: f64,
    pub epsilon: f64,
    pub r: f64,
    pub condition_met: bool,
    pub epsilon_c: Option<f64>,
    pub alpha_phi_bar: Option<f64>,
    pub alpha_psi_bar: Option<f64>,
    /// Whether each fixed point lies in the bracket `(a - 1/eps, a - 1/eps + 1/(beta eps^2)]`.
    pub fixed_points_in_bracket: Option<(bool, bool)>,
    pub ghat_u: Option<ProfileFn>,
    pub ghat_v: Option<ProfileFn>,
    /// Lipschitz constants of Gaussian transport maps onto the two conditional laws.
    pub lipschitz_x_given_y: Option<f64>,
    pub lipschitz_y_given_x: Option<f64>,
    /// Explicit sufficient condition on `eps` in terms of the profiles.
    pub profile_condition_met: Option<bool>,
}

/// `r = eps (kx + ky)(1 - 4/(eps^2 kx ky))` when `sqrt(kx ky) eps > 2`, else 0.
pub fn rate_r(params: &LsiParams) -> Result<RateReport> {
    let LsiParams {
        kappa_x_given_y: kx,
        kappa_y_given_x: ky,
        epsilon: eps,
    } = *params;
    for (name, k) in [("kappa_x_given_y", kx), ("kappa_y_given_x", ky)] {
        if !(k > 0.0 && k.is_finite()) {
            return Err(invalid(name, format!("must be positive, got {k}")));
        }
    }
    check_eps(eps)?;
    let condition_met = (kx * ky).sqrt() * eps > 2.0;
    let r = if condition_met {
        eps * (kx + ky) * (1.0 - 4.0 / (eps * eps * kx * ky))
    } else {
        0.0
    };
    Ok(RateReport {
        kappa_x_given_y: kx,
        kappa_y_given_x: ky,
        epsilon: eps,
        r,
        // Rounding can leave r = 0 just above the boundary.
        condition_met: condition_met && r > 0.0,
        ..Default::default()
    })
}

/// Conditional LSI constant for log-concave marginals:
/// `sqrt(4 a_U / (eps^2 b_V) + a_U^2) + a_U`, equal to `2 a_U` when `b_V` is unbounded.
pub fn kappa_logconcave(alpha_u: f64, beta_v: UpperBound, eps: f64) -> Result<f64> {
    if !(alpha_u > 0.0 && alpha_u.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha_u}")));
    }
    check_beta(beta_v)?;
    check_eps(eps)?;
    Ok(match beta_v {
        UpperBound::Unbounded => 2.0 * alpha_u,
        UpperBound::Finite(b) => (4.0 * alpha_u / (eps * eps * b) + alpha_u * alpha_u).sqrt() + alpha_u,
    })
}

/// Critical regularisation above which the log-concave rate is positive.
pub fn epsilon_c(alpha_u: f64, alpha_v: f64, beta_u: UpperBound, beta_v: UpperBound) -> Result<f64> {
    for (name, a) in [("alpha_u", alpha_u), ("alpha_v", alpha_v)] {
        if !(a > 0.0 && a.is_finite()) {
            return Err(invalid(name, format!("must be positive, got {a}")));
        }
    }
    check_beta(beta_u)?;
    check_beta(beta_v)?;
    for (name, a, b) in [("beta_u", alpha_u, beta_u), ("beta_v", alpha_v, beta_v)] {
        if b.value() < a {
            return Err(invalid(name, format!("must be at least alpha = {a}, got {}", b.value())));
        }
    }
    let (iau, iav) = (1.0 / alpha_u, 1.0 / alpha_v);
    let (ibu, ibv) = (beta_u.recip(), beta_v.recip());
    let num = iau * iav - ibu * ibv;
    let den = ((iau + ibu) * (iav + ibv)).sqrt();
    Ok((num / den).max(0.0))
}

/// Canonical profile function for a convexity deficit `L_W` below distance `R_W`:
/// the smallest `L` with `g_L(R_W)/R_W >= L_W`.
pub fn ghat_from_lr(l_w: f64, r_w: f64) -> Result<ProfileFn> {
    if !(l_w >= 0.0 && l_w.is_finite()) {
        return Err(invalid("L", format!("must be nonnegative, got {l_w}")));
    }
    if !(r_w >= 0.0 && r_w.is_finite()) {
        return Err(invalid("R", format!("must be nonnegative, got {r_w}")));
    }
    if r_w == 0.0 || l_w == 0.0 {
        return Ok(ProfileFn::Zero);
    }
    let map = |l: f64| ProfileFn::Tanh { l }.eval(r_w) / r_w;
    let mut hi = 1.0;
    while map(hi) < l_w {
        hi *= 2.0;
    }
    let l = bisect_increasing(map, l_w, 0.0, hi, REL_TOL, MAX_BISECTION);
    Ok(ProfileFn::canonical(l))
}

/// The pair `F(alpha, .)`, `G(alpha, .)` for fixed `(beta, g, ghat, alpha, eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FAndG {
    pub beta: UpperBound,
    pub g: ProfileFn,
    pub ghat: ProfileFn,
    pub alpha: f64,
    pub epsilon: f64,
}

pub fn f_and_g(beta: UpperBound, g: ProfileFn, ghat: ProfileFn, alpha: f64, eps: f64) -> Result<FAndG> {
    check_beta(beta)?;
    check_eps(eps)?;
    if !(alpha > -1.0 / eps) || !alpha.is_finite() {
        return Err(invalid("alpha", format!("must exceed -1/eps = {}, got {alpha}", -1.0 / eps)));
    }
    Ok(FAndG {
        beta,
        g,
        ghat,
        alpha,
        epsilon: eps,
    })
}

impl FAndG {
    pub fn f(&self, t: f64) -> f64 {
        let b = match self.beta {
            UpperBound::Unbounded => return f64::INFINITY,
            UpperBound::Finite(b) => b,
        };
        let (eps, a) = (self.epsilon, self.alpha);
        let s = t.sqrt();
        let q = 1.0 + eps * a;
        b + t / (eps * q) + s * self.g.eval(s) + s * self.ghat.eval(s) / (q * q)
    }

    /// `inf { t >= 0 : F(t) >= u }`.
    pub fn g_inv(&self, u: f64) -> f64 {
        self.g_inv_tol(u, REL_TOL)
    }

    fn g_inv_tol(&self, u: f64, rel_tol: f64) -> f64 {
        if self.f(0.0) >= u {
            return 0.0;
        }
        let mut hi = 1.0;
        while self.f(hi) < u {
            hi *= 2.0;
        }
        bisect_increasing(|t| self.f(t), u, 0.0, hi, rel_tol, MAX_BISECTION)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPoint {
    pub alpha: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Membership in `(a - 1/eps, a - 1/eps + 1/(beta eps^2)]`.
    pub in_bracket: bool,
}

/// Smallest solution of `alpha = a - 1/eps + G(alpha, 2) / (2 eps^2)`.
///
/// The map on the right is nondecreasing in `alpha`, so iterating from the
/// left end `a - 1/eps` climbs monotonically to the smallest fixed point. If
/// the iteration stalls, the remaining gap is closed by bisection.
pub fn fixed_point_alpha(
    alpha_marginal: f64,
    beta_other: UpperBound,
    g_other: ProfileFn,
    ghat_self: ProfileFn,
    eps: f64,
) -> Result<FixedPoint> {
    if !(alpha_marginal > 0.0 && alpha_marginal.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha_marginal}")));
    }
    check_eps(eps)?;
    check_beta(beta_other)?;
    let left = alpha_marginal - 1.0 / eps;
    let upper = left + beta_other.recip() / (eps * eps);
    let rhs = |a: f64| -> Result<f64> {
        let fg = f_and_g(beta_other, g_other, ghat_self, a, eps)?;
        Ok(left + fg.g_inv_tol(2.0, INNER_REL_TOL) / (2.0 * eps * eps))
    };
    let finish = |alpha: f64, iterations: usize| -> Result<FixedPoint> {
        let residual = (alpha - rhs(alpha)?).abs();
        Ok(FixedPoint {
            alpha,
            residual,
            iterations,
            in_bracket: alpha > left - f64::EPSILON * left.abs() && alpha <= upper,
        })
    };
    if beta_other == UpperBound::Unbounded {
        return finish(left, 0);
    }
    let mut a = left;
    for k in 0..MAX_FIXED_POINT_ITER {
        let next = rhs(a)?;
        if (next - a).abs() <= FIXED_POINT_TOL * next.abs().max(1.0) {
            return finish(next, k + 1);
        }
        a = next;
    }
    // Bisection on h(a) = rhs(a) - a, which is >= 0 at the current iterate.
    let mut lo = a;
    let mut step = 1.0f64.max(a.abs());
    let mut hi = a + step;
    let mut grow = 0;
    while rhs(hi)? - hi > 0.0 {
        lo = hi;
        step *= 2.0;
        hi += step;
        grow += 1;
        if grow > MAX_BISECTION || !hi.is_finite() {
            return Err(Error::NoConvergence {
                iterations: MAX_FIXED_POINT_ITER + grow,
                residual: rhs(a)? - a,
            });
        }
    }
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rhs(mid)? - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = finish(hi, MAX_FIXED_POINT_ITER + MAX_BISECTION)?;
    if out.residual > 1e-9 {
        return Err(Error::NoConvergence {
            iterations: out.iterations,
            residual: out.residual,
        });
    }
    Ok(out)
}

/// `2 (a + 1/eps) exp(-ghat'(0) / (a + 1/eps))`.
pub fn kappa_conditional(alpha_fixed_point: f64, ghat_derivative: f64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let s = alpha_fixed_point + 1.0 / eps;
    if !(s > 0.0) {
        return Err(invalid(
            "alpha",
            format!("alpha + 1/eps must be positive, got {s}"),
        ));
    }
    Ok(2.0 * s * (-ghat_derivative / s).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lipschitz {
    pub l: f64,
    /// Implied LSI constant `2 / L^2`.
    pub lsi_constant: f64,
}

/// `L = (a + 1)^{-1/2} exp(ghat'(0) / (2 (a + 1)))`.
pub fn lipschitz_l(alpha: f64, ghat_derivative: f64) -> Result<Lipschitz> {
    if !(alpha > -1.0) {
        return Err(invalid("alpha", format!("must exceed -1, got {alpha}")));
    }
    let s = alpha + 1.0;
    let l = s.powf(-0.5) * (ghat_derivative / (2.0 * s)).exp();
    Ok(Lipschitz {
        l,
        lsi_constant: 2.0 / (l * l),
    })
}

/// Log-concave marginals: closed-form kappas, `eps_c` and the resulting rate.
pub fn logconcave_report(
    alpha_u: f64,
    alpha_v: f64,
    beta_u: UpperBound,
    beta_v: UpperBound,
    eps: f64,
) -> Result<RateReport> {
    let kx = kappa_logconcave(alpha_u, beta_v, eps)?;
    let ky = kappa_logconcave(alpha_v, beta_u, eps)?;
    let mut report = rate_r(&LsiParams {
        kappa_x_given_y: kx,
        kappa_y_given_x: ky,
        epsilon: eps,
    })?;
    report.epsilon_c = Some(epsilon_c(alpha_u, alpha_v, beta_u, beta_v)?);
    Ok(report)
}

/// Full pipeline for convexity profiles: profile functions, both fixed
/// points, conditional kappas and the rate. The upper-profile functions are
/// taken to be zero, i.e. the Hessian bounds `beta` are global.
pub fn suff_condition_profiles(
    u: &ConvexityProfile,
    v: &ConvexityProfile,
    eps: f64,
) -> Result<RateReport> {
    check_eps(eps)?;
    let ghat_u = ghat_from_lr(u.l, u.r)?;
    let ghat_v = ghat_from_lr(v.l, v.r)?;
    let fp_phi = fixed_point_alpha(u.alpha, v.beta, ProfileFn::Zero, ghat_u, eps)?;
    let fp_psi = fixed_point_alpha(v.alpha, u.beta, ProfileFn::Zero, ghat_v, eps)?;
    let kx = kappa_conditional(fp_phi.alpha, ghat_u.derivative_at_zero(), eps)?;
    let ky = kappa_conditional(fp_psi.alpha, ghat_v.derivative_at_zero(), eps)?;
    let mut report = rate_r(&LsiParams {
        kappa_x_given_y: kx,
        kappa_y_given_x: ky,
        epsilon: eps,
    })?;
    report.alpha_phi_bar = Some(fp_phi.alpha);
    report.alpha_psi_bar = Some(fp_psi.alpha);
    report.fixed_points_in_bracket = Some((fp_phi.in_bracket, fp_psi.in_bracket));
    report.ghat_u = Some(ghat_u);
    report.ghat_v = Some(ghat_v);
    report.lipschitz_x_given_y =
        Some(lipschitz_l(fp_phi.alpha + 1.0 / eps - 1.0, ghat_u.derivative_at_zero())?.l);
    report.lipschitz_y_given_x =
        Some(lipschitz_l(fp_psi.alpha + 1.0 / eps - 1.0, ghat_v.derivative_at_zero())?.l);
    let threshold = (u.alpha * v.alpha).powf(-0.5)
        * (ghat_u.derivative_at_zero() / (2.0 * u.alpha) + ghat_v.derivative_at_zero() / (2.0 * v.alpha))
            .exp();
    report.profile_condition_met = Some(eps > threshold);
    if u.l == 0.0 && v.l == 0.0 {
        let at_least = |b: UpperBound, a: f64| match b {
            UpperBound::Finite(b) => UpperBound::Finite(b.max(a)),
            UpperBound::Unbounded => UpperBound::Unbounded,
        };
        report.epsilon_c = Some(epsilon_c(
            u.alpha,
            v.alpha,
            at_least(u.beta, u.alpha),
            at_least(v.beta, v.alpha),
        )?);
    }
    Ok(report)
}
