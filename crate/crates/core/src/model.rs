//! Problem definitions: marginal potentials `W` with `mu = e^{-W} dx`, transport
//! costs, and seeded random streams.

use crate::error::{invalid, Error, Result};
use crate::numeric::{check_spd, eigen_range, log_sum_exp, normal_cdf, simpson, LN_2PI};
use crate::points::Points;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_pcg::Pcg64;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Upper Hessian bound. `Unbounded` follows the convention `1/beta = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpperBound {
    Finite(f64),
    Unbounded,
}

impl UpperBound {
    pub fn recip(self) -> f64 {
        match self {
            UpperBound::Finite(b) => 1.0 / b,
            UpperBound::Unbounded => 0.0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            UpperBound::Finite(b) => b,
            UpperBound::Unbounded => f64::INFINITY,
        }
    }

    pub fn from_value(b: f64) -> Self {
        if b.is_infinite() {
            UpperBound::Unbounded
        } else {
            UpperBound::Finite(b)
        }
    }
}

/// `alpha I <= Hess W <= beta I` in semidefinite order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianBounds {
    pub alpha: f64,
    pub beta: UpperBound,
}

impl HessianBounds {
    pub fn new(alpha: f64, beta: UpperBound) -> Result<Self> {
        if let UpperBound::Finite(b) = beta {
            if !(alpha <= b) {
                return Err(invalid("beta", format!("alpha {alpha} exceeds beta {b}")));
            }
        }
        Ok(Self { alpha, beta })
    }
}

/// Registered closed-form potentials that are not Gaussian or mixtures.
/// Both are coordinatewise separable and even.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticPotential {
    /// `W(x) = sum_k x_k^2/2 + a log cosh x_k`, Hessian in `[min(1,1+a), max(1,1+a)]`.
    CoshPerturbed { strength: f64 },
    /// `W(x) = sum_k x_k^4/4 + x_k^2/2`, Hessian in `[1, inf)`.
    Quartic,
}

impl AnalyticPotential {
    pub fn from_name(name: &str, param: f64) -> Result<Self> {
        match name {
            "cosh-perturbed" => {
                if param <= -1.0 {
                    return Err(invalid("strength", "must exceed -1"));
                }
                Ok(AnalyticPotential::CoshPerturbed { strength: param })
            }
            "quartic" => Ok(AnalyticPotential::Quartic),
            other => Err(invalid("potential", format!("unknown analytic potential `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticPotential::CoshPerturbed { .. } => "cosh-perturbed",
            AnalyticPotential::Quartic => "quartic",
        }
    }

    pub fn param(&self) -> f64 {
        match self {
            AnalyticPotential::CoshPerturbed { strength } => *strength,
            AnalyticPotential::Quartic => 0.0,
        }
    }

    // Unnormalised one-dimensional value and derivative.
    fn value_1d(&self, x: f64) -> f64 {
        match *self {
            AnalyticPotential::CoshPerturbed { strength } => 0.5 * x * x + strength * log_cosh(x),
            AnalyticPotential::Quartic => 0.25 * x.powi(4) + 0.5 * x * x,
        }
    }

    fn deriv_1d(&self, x: f64) -> f64 {
        match *self {
            AnalyticPotential::CoshPerturbed { strength } => x + strength * x.tanh(),
            AnalyticPotential::Quartic => x.powi(3) + x,
        }
    }

    fn bounds(&self) -> HessianBounds {
        match *self {
            AnalyticPotential::CoshPerturbed { strength } => HessianBounds {
                alpha: 1.0f64.min(1.0 + strength),
                beta: UpperBound::Finite(1.0f64.max(1.0 + strength)),
            },
            AnalyticPotential::Quartic => HessianBounds {
                alpha: 1.0,
                beta: UpperBound::Unbounded,
            },
        }
    }
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

const TABLE_HALF_WIDTH: f64 = 12.0;
const TABLE_POINTS: usize = 8001;

/// Tabulated one-dimensional CDF for a coordinate marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedCdf {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl TabulatedCdf {
    fn from_density(density: impl Fn(f64) -> f64) -> Self {
        let h = 2.0 * TABLE_HALF_WIDTH / (TABLE_POINTS - 1) as f64;
        let xs: Vec<f64> = (0..TABLE_POINTS)
            .map(|i| -TABLE_HALF_WIDTH + h * i as f64)
            .collect();
        let dens: Vec<f64> = xs.iter().map(|&x| density(x)).collect();
        let mut cdf = vec![0.0; TABLE_POINTS];
        for i in 1..TABLE_POINTS {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
        }
        let total = cdf[TABLE_POINTS - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { xs, cdf }
    }

    pub fn eval(&self, x: f64) -> f64 {
        crate::numeric::interp_linear(&self.xs, &self.cdf, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PotentialKind {
    /// Centred Gaussian with the given covariance; `W(x) = x^T A x / 2 + const`.
    Quadratic {
        covariance: DMatrix<f64>,
        precision: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    /// Isotropic Gaussian mixture with common variance.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variance: f64,
    },
    Analytic {
        potential: AnalyticPotential,
        table: TabulatedCdf,
        variance_1d: f64,
    },
}

/// A marginal `mu(dx) = exp(-W(x)) dx` with its own gradient evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSpec {
    dim: usize,
    kind: PotentialKind,
    log_norm: f64,
    bounds: Option<HessianBounds>,
}

impl PotentialSpec {
    pub fn gaussian(covariance: DMatrix<f64>) -> Result<Self> {
        check_spd(&covariance)?;
        let dim = covariance.nrows();
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("covariance", "Cholesky factorisation failed"))?;
        let precision = chol.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let (lo, hi) = eigen_range(&precision);
        Ok(Self {
            dim,
            log_norm: 0.5 * (dim as f64 * LN_2PI + log_det),
            bounds: Some(HessianBounds {
                alpha: lo,
                beta: UpperBound::Finite(hi),
            }),
            kind: PotentialKind::Quadratic {
                covariance,
                precision,
                chol: chol.l(),
            },
        })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(invalid("weights", "must be non-empty and match the means"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(invalid("weights", "must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", format!("sum to {total}, expected 1")));
        }
        if !(variance > 0.0) {
            return Err(invalid("variance", "must be positive"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(invalid("means", "inconsistent dimensions"));
        }
        // Hess W = I/s^2 - Cov_resp(m)/s^4, and the responsibility-weighted
        // covariance of points in a set of diameter D is at most D^2/4.
        let mut diam2: f64 = 0.0;
        for a in &means {
            for b in &means {
                diam2 = diam2.max(a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum());
            }
        }
        let bounds = HessianBounds {
            alpha: 1.0 / variance - diam2 / (4.0 * variance * variance),
            beta: UpperBound::Finite(1.0 / variance),
        };
        Ok(Self {
            dim,
            kind: PotentialKind::Mixture {
                weights,
                means,
                variance,
            },
            log_norm: 0.0,
            bounds: Some(bounds),
        })
    }

    /// Symmetric two-component mixture at `+-offset` with unit component variance (d = 1).
    pub fn symmetric_mixture(offset: f64) -> Self {
        Self::mixture(vec![0.5, 0.5], vec![vec![-offset], vec![offset]], 1.0)
            .expect("valid mixture")
    }

    pub fn analytic(potential: AnalyticPotential, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        let z1 = simpson(
            |x| (-potential.value_1d(x)).exp(),
            -TABLE_HALF_WIDTH,
            TABLE_HALF_WIDTH,
            20_000,
        );
        let var = simpson(
            |x| x * x * (-potential.value_1d(x)).exp(),
            -TABLE_HALF_WIDTH,
            TABLE_HALF_WIDTH,
            20_000,
        ) / z1;
        let table = TabulatedCdf::from_density(|x| (-potential.value_1d(x)).exp());
        Ok(Self {
            dim,
            log_norm: dim as f64 * z1.ln(),
            bounds: Some(potential.bounds()),
            kind: PotentialKind::Analytic {
                potential,
                table,
                variance_1d: var,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn bounds(&self) -> Option<HessianBounds> {
        self.bounds
    }

    /// Overrides the declared Hessian bounds.
    pub fn with_bounds(mut self, bounds: HessianBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn covariance(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            PotentialKind::Quadratic { covariance, .. } => Some(covariance),
            _ => None,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.kind, PotentialKind::Quadratic { .. })
    }

    /// `W(x)`, normalised so that `exp(-W)` is a probability density.
    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PotentialKind::Quadratic { precision, .. } => {
                let mut q = 0.0;
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        q += x[i] * precision[(i, j)] * x[j];
                    }
                }
                0.5 * q + self.log_norm
            }
            PotentialKind::Mixture {
                weights,
                means,
                variance,
            } => {
                let norm = 0.5 * self.dim as f64 * (LN_2PI + variance.ln());
                let terms = weights.iter().zip(means).map(|(w, m)| {
                    let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                    w.ln() - 0.5 * d2 / variance - norm
                });
                -log_sum_exp(terms)
            }
            PotentialKind::Analytic { potential, .. } => {
                x.iter().map(|&v| potential.value_1d(v)).sum::<f64>() + self.log_norm
            }
        }
    }

    /// Writes `grad W(x)` into `out`.
    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            PotentialKind::Quadratic { precision, .. } => {
                if self.dim == 1 {
                    out[0] = precision[(0, 0)] * x[0];
                    return;
                }
                for i in 0..self.dim {
                    let mut s = 0.0;
                    for j in 0..self.dim {
                        s += precision[(i, j)] * x[j];
                    }
                    out[i] = s;
                }
            }
            PotentialKind::Mixture {
                weights,
                means,
                variance,
            } => {
                // Two passes over the components keep this allocation-free.
                let log_weight = |w: &f64, m: &Vec<f64>| {
                    w.ln() - 0.5 * x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / variance
                };
                let top = weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| log_weight(w, m))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut total = 0.0;
                for (w, m) in weights.iter().zip(means) {
                    let r = (log_weight(w, m) - top).exp();
                    total += r;
                    for k in 0..self.dim {
                        out[k] += r * (x[k] - m[k]);
                    }
                }
                let scale = 1.0 / (total * variance);
                out.iter_mut().for_each(|o| *o *= scale);
            }
            PotentialKind::Analytic { potential, .. } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = potential.deriv_1d(v);
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.gradient_into(x, &mut g);
        g
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        (-self.value(x)).exp()
    }

    /// Mean and variance of coordinate `k` under the marginal.
    pub fn coordinate_moments(&self, k: usize) -> (f64, f64) {
        match &self.kind {
            PotentialKind::Quadratic { covariance, .. } => (0.0, covariance[(k, k)]),
            PotentialKind::Mixture {
                weights,
                means,
                variance,
            } => {
                let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m[k]).sum();
                let second: f64 = weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| w * (m[k] * m[k] + variance))
                    .sum();
                (mean, second - mean * mean)
            }
            PotentialKind::Analytic { variance_1d, .. } => (0.0, *variance_1d),
        }
    }

    /// CDF of coordinate `k` under the marginal.
    pub fn coordinate_cdf(&self, k: usize, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Quadratic { covariance, .. } => normal_cdf(x / covariance[(k, k)].sqrt()),
            PotentialKind::Mixture {
                weights,
                means,
                variance,
            } => {
                let s = variance.sqrt();
                weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| w * normal_cdf((x - m[k]) / s))
                    .sum()
            }
            PotentialKind::Analytic { table, .. } => table.eval(x),
        }
    }

    /// Draws one sample. Errors for kinds without an exact sampler.
    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            PotentialKind::Quadratic { chol, .. } => {
                let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..self.dim {
                    out[i] = (0..=i).map(|j| chol[(i, j)] * z[j]).sum();
                }
                Ok(())
            }
            PotentialKind::Mixture {
                weights,
                means,
                variance,
            } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut comp = weights.len() - 1;
                for (c, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = c;
                        break;
                    }
                }
                let s = variance.sqrt();
                for k in 0..self.dim {
                    let z: f64 = rng.sample(StandardNormal);
                    out[k] = means[comp][k] + s * z;
                }
                Ok(())
            }
            PotentialKind::Analytic { potential, .. } => Err(Error::Unsupported(format!(
                "no exact sampler for analytic potential `{}`",
                potential.name()
            ))),
        }
    }
}

/// Transport cost `c(x, y)` with analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostSpec {
    /// `|x - y|^2 / 2`.
    Quadratic,
    Analytic(AnalyticCost),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticCost {
    /// `c = 0`, which decouples the coordinates.
    Zero,
    /// `delta^2 (sqrt(1 + |x - y|^2 / delta^2) - 1)`.
    PseudoHuber { delta: f64 },
}

impl CostSpec {
    pub fn from_name(name: &str, param: f64) -> Result<Self> {
        match name {
            "quadratic" => Ok(CostSpec::Quadratic),
            "zero" => Ok(CostSpec::Analytic(AnalyticCost::Zero)),
            "pseudo-huber" => {
                if !(param > 0.0) {
                    return Err(invalid("delta", "must be positive"));
                }
                Ok(CostSpec::Analytic(AnalyticCost::PseudoHuber { delta: param }))
            }
            other => Err(invalid("cost", format!("unknown cost `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostSpec::Quadratic => "quadratic",
            CostSpec::Analytic(AnalyticCost::Zero) => "zero",
            CostSpec::Analytic(AnalyticCost::PseudoHuber { .. }) => "pseudo-huber",
        }
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match *self {
            CostSpec::Quadratic => 0.5 * d2,
            CostSpec::Analytic(AnalyticCost::Zero) => 0.0,
            CostSpec::Analytic(AnalyticCost::PseudoHuber { delta }) => {
                delta * delta * ((1.0 + d2 / (delta * delta)).sqrt() - 1.0)
            }
        }
    }

    /// Writes `grad_x c(x, y)` into `out`.
    #[inline]
    pub fn grad_x_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match *self {
            CostSpec::Quadratic => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = a - b;
                }
            }
            CostSpec::Analytic(AnalyticCost::Zero) => out.iter_mut().for_each(|o| *o = 0.0),
            CostSpec::Analytic(AnalyticCost::PseudoHuber { delta }) => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let s = (1.0 + d2 / (delta * delta)).sqrt();
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = (a - b) / s;
                }
            }
        }
    }

    /// Writes `grad_y c(x, y)` into `out`.
    #[inline]
    pub fn grad_y_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match *self {
            CostSpec::Quadratic => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = b - a;
                }
            }
            _ => {
                self.grad_x_into(x, y, out);
                out.iter_mut().for_each(|o| *o = -*o);
            }
        }
    }

    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.grad_x_into(x, y, &mut g);
        g
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.grad_y_into(x, y, &mut g);
        g
    }

    /// Bound `R` on the operator norm of the full Hessian of `c`.
    pub fn hessian_bound(&self) -> f64 {
        match self {
            CostSpec::Quadratic => 2.0,
            CostSpec::Analytic(AnalyticCost::Zero) => 0.0,
            CostSpec::Analytic(AnalyticCost::PseudoHuber { .. }) => 2.0,
        }
    }
}

/// Marginals plus cost. Two marginals for the standard dynamics; `m >= 2` for
/// the multi-marginal variant, where the cost is summed over all pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub marginals: Vec<PotentialSpec>,
    pub cost: CostSpec,
}

impl Problem {
    pub fn new(marginals: Vec<PotentialSpec>, cost: CostSpec) -> Result<Self> {
        if marginals.len() < 2 {
            return Err(invalid("marginals", "need at least two"));
        }
        let d = marginals[0].dim();
        if let Some(bad) = marginals.iter().find(|m| m.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
        Ok(Self { marginals, cost })
    }

    pub fn pair(mu: PotentialSpec, nu: PotentialSpec, cost: CostSpec) -> Result<Self> {
        Self::new(vec![mu, nu], cost)
    }

    pub fn mu(&self) -> &PotentialSpec {
        &self.marginals[0]
    }

    pub fn nu(&self) -> &PotentialSpec {
        &self.marginals[1]
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    pub fn is_gaussian(&self) -> bool {
        self.cost == CostSpec::Quadratic && self.marginals.iter().all(PotentialSpec::is_quadratic)
    }
}

/// Centred Gaussian marginals with quadratic cost. Hessian bounds are the
/// extreme eigenvalues of the precision matrices.
pub fn make_gaussian_problem(
    sigma_mu: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    epsilon: f64,
) -> Result<(PotentialSpec, PotentialSpec, CostSpec)> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if sigma_mu.shape() != sigma_nu.shape() {
        return Err(Error::DimensionMismatch {
            expected: sigma_mu.nrows(),
            got: sigma_nu.nrows(),
        });
    }
    Ok((
        PotentialSpec::gaussian(sigma_mu.clone())?,
        PotentialSpec::gaussian(sigma_nu.clone())?,
        CostSpec::Quadratic,
    ))
}

/// Seed plus stream index. Substreams are derived deterministically, so the
/// random numbers consumed by a particle never depend on scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5EED))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Compact generator for per-particle noise: PCG with this stream as its
    /// increment and a state drawn from [`RngStream::rng`].
    pub fn pcg(&self) -> Pcg64 {
        let state: u128 = self.rng().random();
        Pcg64::new(state, self.stream as u128)
    }
}

const SAMPLE_CHUNK: usize = 4096;

/// Draws `n` i.i.d. samples from `exp(-W)`. Chunks use independent substreams.
pub fn sample_marginal(spec: &PotentialSpec, n: usize, rng: RngStream) -> Result<Points> {
    if let PotentialKind::Analytic { potential, .. } = spec.kind() {
        return Err(Error::Unsupported(format!(
            "no exact sampler for analytic potential `{}`",
            potential.name()
        )));
    }
    let d = spec.dim();
    let mut data = vec![0.0; n * d];
    data.par_chunks_mut(SAMPLE_CHUNK * d)
        .enumerate()
        .try_for_each(|(c, chunk)| {
            let mut r = rng.substream(c as u64).rng();
            chunk
                .chunks_exact_mut(d)
                .try_for_each(|out| spec.draw(&mut r, out))
        })?;
    Points::new(d, data)
}

/// Samples `n` pairs from the centred joint Gaussian with blocks
/// `[[S_mu, S],[S^T, S_nu]]`.
pub fn sample_joint_gaussian(
    sigma_mu: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    n: usize,
    rng: RngStream,
) -> Result<(Points, Points)> {
    let d = sigma_mu.nrows();
    let mut joint = DMatrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(sigma_mu);
    joint.view_mut((d, d), (d, d)).copy_from(sigma_nu);
    joint.view_mut((0, d), (d, d)).copy_from(cross);
    joint.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
    let spec = PotentialSpec::gaussian(joint)?;
    let both = sample_marginal(&spec, n, rng)?;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    for r in both.rows() {
        xs.extend_from_slice(&r[..d]);
        ys.extend_from_slice(&r[d..]);
    }
    Ok((Points::new(d, xs)?, Points::new(d, ys)?))
}

/// Dense vector helper.
pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
