//! Closed forms for centred Gaussian marginals with quadratic cost: the
//! Riccati flow of the cross-covariance, its fixed points and Gaussian
//! relative entropies.

use crate::error::{invalid, Error, Result};
use crate::numeric::{check_spd, eigen_range};
use nalgebra::DMatrix;
use std::io::Write;

/// Admissible negative eigenvalue of the joint covariance before the flow is
/// declared to have left the PSD cone.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Cross-covariance `E[X Y^T]` together with the fixed marginal covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiState {
    pub sigma: DMatrix<f64>,
    pub sigma_mu: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
    pub epsilon: f64,
}

impl RiccatiState {
    pub fn new(
        sigma: DMatrix<f64>,
        sigma_mu: DMatrix<f64>,
        sigma_nu: DMatrix<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        check_spd(&sigma_mu)?;
        check_spd(&sigma_nu)?;
        let d = sigma_mu.nrows();
        for m in [&sigma_nu, &sigma] {
            if m.shape() != (d, d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: m.nrows(),
                });
            }
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be nonnegative, got {epsilon}")));
        }
        Ok(Self {
            sigma,
            sigma_mu,
            sigma_nu,
            epsilon,
        })
    }

    /// Scalar convenience constructor for d = 1.
    pub fn scalar(sigma: f64, sigma_mu: f64, sigma_nu: f64, epsilon: f64) -> Result<Self> {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(m(sigma), m(sigma_mu), m(sigma_nu), epsilon)
    }

    /// Product coupling, `sigma = 0`.
    pub fn product(sigma_mu: DMatrix<f64>, sigma_nu: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let d = sigma_mu.nrows();
        Self::new(DMatrix::zeros(d, d), sigma_mu, sigma_nu, epsilon)
    }

    pub fn dim(&self) -> usize {
        self.sigma_mu.nrows()
    }

    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    /// Block covariance `[[S_mu, S], [S^T, S_nu]]`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut c = DMatrix::zeros(2 * d, 2 * d);
        c.view_mut((0, 0), (d, d)).copy_from(&self.sigma_mu);
        c.view_mut((d, d), (d, d)).copy_from(&self.sigma_nu);
        c.view_mut((0, d), (d, d)).copy_from(&self.sigma);
        c.view_mut((d, 0), (d, d)).copy_from(&self.sigma.transpose());
        c
    }

    pub fn min_joint_eigenvalue(&self) -> f64 {
        eigen_range(&self.joint_covariance()).0
    }
}

fn inverse_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .cholesky()
        .expect("marginal covariances are checked at construction")
        .inverse()
}

/// Right-hand side `S_mu + S_nu - (S^T + eps I) S_mu^{-1} S - S S_nu^{-1} (S^T + eps I)`.
pub fn riccati_rhs(state: &RiccatiState) -> DMatrix<f64> {
    rhs_with(
        &state.sigma,
        &state.sigma_mu,
        &state.sigma_nu,
        &inverse_spd(&state.sigma_mu),
        &inverse_spd(&state.sigma_nu),
        state.epsilon,
    )
}

fn rhs_with(
    s: &DMatrix<f64>,
    sigma_mu: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    p_mu: &DMatrix<f64>,
    p_nu: &DMatrix<f64>,
    eps: f64,
) -> DMatrix<f64> {
    let d = s.nrows();
    let shifted = s.transpose() + DMatrix::identity(d, d) * eps;
    sigma_mu + sigma_nu - &shifted * p_mu * s - s * p_nu * &shifted
}

/// Sampled solution of the Riccati flow.
#[derive(Clone, Debug)]
pub struct RiccatiTrajectory {
    pub context: RiccatiState,
    pub times: Vec<f64>,
    pub sigmas: Vec<DMatrix<f64>>,
}

impl RiccatiTrajectory {
    pub fn state(&self, i: usize) -> RiccatiState {
        self.context.with_sigma(self.sigmas[i].clone())
    }

    pub fn terminal(&self) -> RiccatiState {
        self.state(self.sigmas.len() - 1)
    }

    /// Linear interpolation between stored samples, clamped to the time range.
    pub fn sigma_at(&self, t: f64) -> DMatrix<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.sigmas[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.sigmas[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        &self.sigmas[k - 1] * (1.0 - w) + &self.sigmas[k] * w
    }

    /// CSV with columns `t, sigma_ij (row-major), residual, entropy_vs_terminal`.
    pub fn write_csv(&self, reference: &RiccatiState, mut w: impl Write) -> Result<()> {
        let d = self.context.dim();
        let mut header = vec!["t".to_string()];
        for i in 0..d {
            for j in 0..d {
                header.push(format!("sigma_{i}{j}"));
            }
        }
        header.push("residual".into());
        header.push("entropy_vs_pi".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, (t, s)) in self.times.iter().zip(&self.sigmas).enumerate() {
            let state = self.state(i);
            let mut row = vec![format!("{t:.16e}")];
            for a in 0..d {
                for b in 0..d {
                    row.push(format!("{:.16e}", s[(a, b)]));
                }
            }
            row.push(format!("{:.16e}", riccati_rhs(&state).norm()));
            let h = gaussian_entropy_vs_pi(&state, reference).unwrap_or(f64::NAN);
            row.push(format!("{h:.16e}"));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Classical fourth-order Runge-Kutta from `state0` up to time `horizon`,
/// sampled at multiples of `dt`. Aborts if the joint covariance leaves the
/// PSD cone by more than [`PSD_TOLERANCE`].
pub fn integrate_riccati(state0: &RiccatiState, horizon: f64, dt: f64) -> Result<RiccatiTrajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", format!("must be nonnegative, got {horizon}")));
    }
    let p_mu = inverse_spd(&state0.sigma_mu);
    let p_nu = inverse_spd(&state0.sigma_nu);
    let f = |s: &DMatrix<f64>| {
        rhs_with(
            s,
            &state0.sigma_mu,
            &state0.sigma_nu,
            &p_mu,
            &p_nu,
            state0.epsilon,
        )
    };
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut sigmas = Vec::with_capacity(steps + 1);
    let mut s = state0.sigma.clone();
    times.push(0.0);
    sigmas.push(s.clone());
    let check_psd = |s: &DMatrix<f64>, t: f64| -> Result<()> {
        let m = state0.with_sigma(s.clone()).min_joint_eigenvalue();
        if m < -PSD_TOLERANCE || !m.is_finite() {
            return Err(Error::LostPsd {
                t,
                min_eigenvalue: m,
            });
        }
        Ok(())
    };
    check_psd(&s, 0.0)?;
    for k in 1..=steps {
        let t = (k as f64 * dt).min(horizon);
        let h = t - times[k - 1];
        let k1 = f(&s);
        let k2 = f(&(&s + &k1 * (0.5 * h)));
        let k3 = f(&(&s + &k2 * (0.5 * h)));
        let k4 = f(&(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_psd(&s, t)?;
        times.push(t);
        sigmas.push(s.clone());
    }
    Ok(RiccatiTrajectory {
        context: state0.clone(),
        times,
        sigmas,
    })
}

/// Roots `(sigma-, sigma+)` of the scalar Riccati right-hand side.
pub fn sigma_fixed_points_1d(sigma_mu: f64, sigma_nu: f64, epsilon: f64) -> (f64, f64) {
    let half = 0.5 * epsilon;
    let root = (half * half + sigma_mu * sigma_nu).sqrt();
    (-half - root, -half + root)
}

/// Decay rate of `|sigma_t - sigma+|` near the stable root in d = 1.
pub fn linearized_rate_1d(sigma_mu: f64, sigma_nu: f64, epsilon: f64) -> f64 {
    let (_, plus) = sigma_fixed_points_1d(sigma_mu, sigma_nu, epsilon);
    (1.0 / sigma_mu + 1.0 / sigma_nu) * (2.0 * plus + epsilon)
}

/// `KL(N(0, c_t) | N(0, c_inf))`.
pub fn gaussian_kl(c_t: &DMatrix<f64>, c_inf: &DMatrix<f64>) -> Result<f64> {
    if c_t.shape() != c_inf.shape() {
        return Err(Error::DimensionMismatch {
            expected: c_inf.nrows(),
            got: c_t.nrows(),
        });
    }
    let n = c_t.nrows() as f64;
    let ch_inf = c_inf.clone().cholesky().ok_or_else(|| {
        check_spd(c_inf).err().unwrap_or(Error::NotPositiveDefinite {
            index: 0,
            eigenvalue: 0.0,
        })
    })?;
    let ch_t = c_t.clone().cholesky().ok_or_else(|| {
        check_spd(c_t).err().unwrap_or(Error::NotPositiveDefinite {
            index: 0,
            eigenvalue: 0.0,
        })
    })?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = ch_inf.solve(c_t).trace();
    let kl = 0.5 * (trace - n + logdet(&ch_inf.l()) - logdet(&ch_t.l()));
    Ok(kl.max(0.0))
}

/// Relative entropy of the Gaussian coupling `state` against the one at `state_inf`.
pub fn gaussian_entropy_vs_pi(state: &RiccatiState, state_inf: &RiccatiState) -> Result<f64> {
    gaussian_kl(&state.joint_covariance(), &state_inf.joint_covariance())
}

/// Energy `E[c] + eps H(P | mu x nu)` of the centred Gaussian coupling.
pub fn gaussian_energy(state: &RiccatiState) -> Result<f64> {
    let transport = 0.5 * (state.sigma_mu.trace() + state.sigma_nu.trace()) - state.sigma.trace();
    let d = state.dim();
    let mut product = DMatrix::zeros(2 * d, 2 * d);
    product.view_mut((0, 0), (d, d)).copy_from(&state.sigma_mu);
    product.view_mut((d, d), (d, d)).copy_from(&state.sigma_nu);
    Ok(transport + state.epsilon * gaussian_kl(&state.joint_covariance(), &product)?)
}

const STATIONARY_TOL: f64 = 1e-10;
const STATIONARY_MAX_STEPS: usize = 10_000_000;

/// Stable zero of the Riccati right-hand side, reached by integrating the flow
/// from the product coupling until the residual norm drops below 1e-10.
pub fn entropic_ot_gaussian_stationary(
    sigma_mu: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    epsilon: f64,
) -> Result<RiccatiState> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    let state = RiccatiState::product(sigma_mu.clone(), sigma_nu.clone(), epsilon)?;
    let p_mu = inverse_spd(sigma_mu);
    let p_nu = inverse_spd(sigma_nu);
    let (_, lmu) = eigen_range(&p_mu);
    let (_, lnu) = eigen_range(&p_nu);
    let (_, smu) = eigen_range(sigma_mu);
    let (_, snu) = eigen_range(sigma_nu);
    let h = 1.0 / ((lmu + lnu) * (2.0 * (smu * snu).sqrt() + epsilon));
    let f = |s: &DMatrix<f64>| rhs_with(s, sigma_mu, sigma_nu, &p_mu, &p_nu, epsilon);
    let mut s = state.sigma.clone();
    let mut residual = f(&s).norm();
    for _ in 0..STATIONARY_MAX_STEPS {
        if residual < STATIONARY_TOL {
            return Ok(state.with_sigma(s));
        }
        let k1 = f(&s);
        let k2 = f(&(&s + &k1 * (0.5 * h)));
        let k3 = f(&(&s + &k2 * (0.5 * h)));
        let k4 = f(&(&s + &k3 * h));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        residual = f(&s).norm();
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: STATIONARY_MAX_STEPS,
        residual,
    })
}
