//! Measurements comparing particle clouds with the reference coupling:
//! marginal tests, drift discrepancy, relative entropy and Wasserstein
//! distances.

use crate::condexp::{fit_predict, CondExpEstimator};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{gaussian_energy, gaussian_kl, RiccatiState};
use crate::integrator::{ParticleCloud, Trajectory};
use crate::model::{CostSpec, PotentialKind, PotentialSpec, Problem, RngStream};
use crate::points::Points;
use crate::sinkhorn::{grad_phi_via_conditional, grad_psi_via_conditional, GridMeasure, SinkhornSolution};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;

/// Fraction of particles allowed outside the reference grid box.
pub const MAX_OUTSIDE_FRACTION: f64 = 0.01;

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Two-sided KS statistic of `samples` against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateTest {
    /// `None` when no CDF is available for the marginal.
    pub ks: Option<f64>,
    pub mean_z: f64,
    pub variance_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalReport {
    pub n: usize,
    /// Per slot, per coordinate.
    pub coordinates: Vec<Vec<CoordinateTest>>,
}

impl MarginalReport {
    pub fn max_ks(&self) -> Option<f64> {
        self.coordinates
            .iter()
            .flatten()
            .map(|c| c.ks)
            .try_fold(0.0f64, |acc, k| k.map(|k| acc.max(k)))
    }

    pub fn passes_ks(&self) -> bool {
        self.max_ks().is_some_and(|k| k < ks_critical_1pct(self.n))
    }
}

fn has_cdf(spec: &PotentialSpec) -> bool {
    match spec.kind() {
        PotentialKind::Quadratic { covariance, .. } => covariance.nrows() == 1 || is_diagonal(covariance),
        _ => true,
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// KS statistics and moment z-scores of every slot against its marginal.
/// Coordinatewise CDFs are exact for all built-in kinds; the KS entry is left
/// empty if a correlated Gaussian makes the marginal of a coordinate
/// inconvenient to state.
pub fn marginal_tests(cloud: &ParticleCloud, marginals: &[PotentialSpec]) -> Result<MarginalReport> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Empty("cloud"));
    }
    if marginals.len() != cloud.slots.len() {
        return Err(Error::DimensionMismatch {
            expected: cloud.slots.len(),
            got: marginals.len(),
        });
    }
    let mut coordinates = Vec::new();
    for (slot, spec) in cloud.slots.iter().zip(marginals) {
        let mut per = Vec::new();
        for k in 0..slot.dim() {
            let col = slot.column(k);
            let (m, v) = spec.coordinate_moments(k);
            let ks = if has_cdf(spec) {
                Some(ks_statistic(&col, |x| spec.coordinate_cdf(k, x))?)
            } else {
                None
            };
            let nf = n as f64;
            let mean = col.iter().sum::<f64>() / nf;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
            let m4 = col.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
            per.push(CoordinateTest {
                ks,
                mean_z: (mean - m) / (v / nf).sqrt(),
                variance_z: (var - v) / ((m4 - var * var).max(f64::MIN_POSITIVE) / nf).sqrt(),
            });
        }
        coordinates.push(per);
    }
    Ok(MarginalReport { n, coordinates })
}

/// Reference gradient fields `grad phi` and `grad psi`.
#[derive(Clone, Debug)]
pub enum DriftReference {
    /// Nodal gradients from a grid solution, interpolated to particles.
    Grid {
        mu: GridMeasure,
        nu: GridMeasure,
        grad_phi: Points,
        grad_psi: Points,
    },
    /// `grad phi(x) = A x`, `grad psi(y) = B y`.
    Linear { phi: DMatrix<f64>, psi: DMatrix<f64> },
}

impl DriftReference {
    pub fn from_grid(sol: &SinkhornSolution) -> Result<Self> {
        Ok(Self::Grid {
            mu: sol.mu.clone(),
            nu: sol.nu.clone(),
            grad_phi: grad_phi_via_conditional(sol, &sol.cost)?,
            grad_psi: grad_psi_via_conditional(sol, &sol.cost)?,
        })
    }

    /// Gaussian problem with quadratic cost: `E_pi[Y | X = x] = S^T S_mu^{-1} x`,
    /// so `grad phi(x) = (I - S^T S_mu^{-1}) x`, and symmetrically for `psi`.
    pub fn gaussian(stationary: &RiccatiState) -> Result<Self> {
        let d = stationary.dim();
        let inv = |m: &DMatrix<f64>| {
            m.clone()
                .cholesky()
                .map(|c| c.inverse())
                .ok_or(Error::NotPositiveDefinite {
                    index: 0,
                    eigenvalue: 0.0,
                })
        };
        let id = DMatrix::<f64>::identity(d, d);
        let s = &stationary.sigma;
        Ok(Self::Linear {
            phi: &id - s.transpose() * inv(&stationary.sigma_mu)?,
            psi: &id - s * inv(&stationary.sigma_nu)?,
        })
    }

    /// Field values at `points` for side 0 (`phi`) or 1 (`psi`), with the
    /// number of points that fell outside the grid box.
    fn evaluate(&self, points: &Points, side: usize) -> Result<(Points, usize)> {
        let d = points.dim();
        let mut out = Points::zeros(points.len(), d);
        match self {
            DriftReference::Linear { phi, psi } => {
                let a = if side == 0 { phi } else { psi };
                if a.nrows() != d {
                    return Err(Error::DimensionMismatch {
                        expected: a.nrows(),
                        got: d,
                    });
                }
                for (o, x) in out.as_mut_slice().chunks_exact_mut(d).zip(points.rows()) {
                    for k in 0..d {
                        o[k] = (0..d).map(|l| a[(k, l)] * x[l]).sum();
                    }
                }
                Ok((out, 0))
            }
            DriftReference::Grid {
                mu,
                nu,
                grad_phi,
                grad_psi,
            } => {
                let (grid, field) = if side == 0 { (mu, grad_phi) } else { (nu, grad_psi) };
                if grid.dim() != d {
                    return Err(Error::DimensionMismatch {
                        expected: grid.dim(),
                        got: d,
                    });
                }
                let columns: Vec<Vec<f64>> = (0..d).map(|k| field.column(k)).collect();
                let outside: usize = out
                    .as_mut_slice()
                    .par_chunks_mut(d)
                    .zip(points.as_slice().par_chunks(d))
                    .map(|(o, x)| {
                        let mut inside = true;
                        for k in 0..d {
                            let (v, ok) = grid.interpolate(&columns[k], x).expect("grid checked");
                            o[k] = v;
                            inside &= ok;
                        }
                        usize::from(!inside)
                    })
                    .sum();
                Ok((out, outside))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftDiscrepancy {
    /// `mean |E[grad_x c | X] - grad phi(X)|^2` over particles.
    pub phi: f64,
    /// `mean |E[grad_y c | Y] - grad psi(Y)|^2` over particles.
    pub psi: f64,
    /// Particles outside the grid box, clamped to it.
    pub outside: usize,
}

impl DriftDiscrepancy {
    pub fn total(&self) -> f64 {
        self.phi + self.psi
    }
}

/// Monte Carlo estimate of the squared `L^2(mu)` and `L^2(nu)` distances
/// between the estimated conditional cost gradients and the reference
/// potential gradients.
pub fn drift_discrepancy(
    cloud: &ParticleCloud,
    cost: &CostSpec,
    est: &CondExpEstimator,
    reference: &DriftReference,
) -> Result<DriftDiscrepancy> {
    if cloud.slots.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: cloud.slots.len(),
        });
    }
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Empty("cloud"));
    }
    let d = cloud.dim();
    let (xs, ys) = (cloud.xs(), cloud.ys());
    let mut outside_total = 0;
    let mut values = [0.0; 2];
    for side in 0..2 {
        let (own, other) = if side == 0 { (xs, ys) } else { (ys, xs) };
        let mut grads = Points::zeros(n, d);
        for (i, g) in grads.as_mut_slice().chunks_exact_mut(d).enumerate() {
            if side == 0 {
                cost.grad_x_into(own.row(i), other.row(i), g);
            } else {
                cost.grad_y_into(other.row(i), own.row(i), g);
            }
        }
        let cond = fit_predict(own, &grads, own, est)?.values;
        let (field, outside) = reference.evaluate(own, side)?;
        outside_total += outside;
        values[side] = cond
            .as_slice()
            .iter()
            .zip(field.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
    }
    if outside_total as f64 > MAX_OUTSIDE_FRACTION * (2 * n) as f64 {
        return Err(Error::OutsideGrid {
            outside: outside_total,
            total: 2 * n,
        });
    }
    if outside_total > 0 {
        log::warn!("{outside_total} particle coordinates outside the grid box were clamped");
    }
    Ok(DriftDiscrepancy {
        phi: values[0],
        psi: values[1],
        outside: outside_total,
    })
}

/// Draws `n` pairs from a grid coupling: a cell `(i, j)` with probability
/// `pi_ij`, then a uniform point inside each cell.
pub fn sample_grid_coupling(sol: &SinkhornSolution, n: usize, rng: RngStream) -> Result<ParticleCloud> {
    let (ax, ay) = match (&sol.mu.axes, &sol.nu.axes) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => return Err(Error::Unsupported("sampling needs regular grids".into())),
    };
    let mp = sol.nu.len();
    let mut cumulative = Vec::with_capacity(sol.mu.len() * mp);
    let mut acc = 0.0;
    for i in 0..sol.mu.len() {
        for j in 0..mp {
            acc += sol.coupling[(i, j)];
            cumulative.push(acc);
        }
    }
    let d = sol.mu.dim();
    let mut r = rng.rng();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    let jitter = |node: &[f64], axes: &[crate::sinkhorn::Axis], r: &mut rand_chacha::ChaCha8Rng, out: &mut Vec<f64>| {
        for (v, a) in node.iter().zip(axes) {
            out.push(v + (r.random::<f64>() - 0.5) * a.step());
        }
    };
    for _ in 0..n {
        let u = r.random::<f64>() * acc;
        let cell = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let (i, j) = (cell / mp, cell % mp);
        jitter(sol.mu.nodes.row(i), &ax, &mut r, &mut xs);
        jitter(sol.nu.nodes.row(j), &ay, &mut r, &mut ys);
    }
    ParticleCloud::new(Points::new(d, xs)?, Points::new(d, ys)?, 0.0)
}

/// Replicate statistics of a nonnegative statistic and the noise threshold
/// `mean + 3 sd`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseCalibration {
    pub mean: f64,
    pub sd: f64,
    pub replicates: usize,
}

impl NoiseCalibration {
    pub fn from_values(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
        Self {
            mean,
            sd: var.sqrt(),
            replicates: values.len(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.mean + 3.0 * self.sd
    }
}

/// Drift discrepancy of clouds of size `n` drawn from the grid coupling
/// itself: the level reached by a perfectly converged particle system.
pub fn resampling_noise(
    sol: &SinkhornSolution,
    n: usize,
    est: &CondExpEstimator,
    replicates: usize,
    rng: RngStream,
) -> Result<NoiseCalibration> {
    let reference = DriftReference::from_grid(sol)?;
    let values = (0..replicates)
        .map(|r| {
            let cloud = sample_grid_coupling(sol, n, rng.substream(r as u64))?;
            Ok(drift_discrepancy(&cloud, &sol.cost, est, &reference)?.total())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(NoiseCalibration::from_values(&values))
}

/// Particle bootstrap of the drift discrepancy: resample pairs with
/// replacement and recompute.
pub fn bootstrap_drift_discrepancy(
    cloud: &ParticleCloud,
    cost: &CostSpec,
    est: &CondExpEstimator,
    reference: &DriftReference,
    replicates: usize,
    rng: RngStream,
) -> Result<NoiseCalibration> {
    let n = cloud.len();
    let values = (0..replicates)
        .map(|b| {
            let mut r = rng.substream(b as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let resampled = ParticleCloud::new(cloud.xs().permuted(&idx), cloud.ys().permuted(&idx), cloud.t)?;
            Ok(drift_discrepancy(&resampled, cost, est, reference)?.total())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(NoiseCalibration::from_values(&values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyMethod {
    ClosedForm,
    Histogram,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyEstimate {
    pub value: f64,
    pub method: EntropyMethod,
}

/// Mean and covariance of the stacked pair `(X, Y)`.
pub fn joint_moments(cloud: &ParticleCloud) -> (DVector<f64>, DMatrix<f64>) {
    let d = cloud.dim();
    let w = cloud.slots.len() * d;
    let n = cloud.len() as f64;
    let mut mean = DVector::zeros(w);
    for (s, slot) in cloud.slots.iter().enumerate() {
        for (k, m) in slot.mean().into_iter().enumerate() {
            mean[s * d + k] = m;
        }
    }
    let mut cov = DMatrix::zeros(w, w);
    let mut z = vec![0.0; w];
    for i in 0..cloud.len() {
        for (s, slot) in cloud.slots.iter().enumerate() {
            for (k, v) in slot.row(i).iter().enumerate() {
                z[s * d + k] = v - mean[s * d + k];
            }
        }
        for a in 0..w {
            for b in a..w {
                cov[(a, b)] += z[a] * z[b];
            }
        }
    }
    for a in 0..w {
        for b in a..w {
            cov[(a, b)] /= n;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// Relative entropy of the moment-matched Gaussian of `cloud` against the
/// centred Gaussian coupling `pi`.
pub fn entropy_vs_pi_gaussian(cloud: &ParticleCloud, pi: &RiccatiState) -> Result<EntropyEstimate> {
    let (mean, cov) = joint_moments(cloud);
    let c_inf = pi.joint_covariance();
    let shift = c_inf
        .clone()
        .cholesky()
        .map(|ch| 0.5 * mean.dot(&ch.solve(&mean)))
        .ok_or(Error::NotPositiveDefinite {
            index: 0,
            eigenvalue: 0.0,
        })?;
    Ok(EntropyEstimate {
        value: gaussian_kl(&cov, &c_inf)? + shift,
        method: EntropyMethod::ClosedForm,
    })
}

/// Histogram of `cloud` on the cells of the grid coupling.
pub fn grid_histogram(cloud: &ParticleCloud, sol: &SinkhornSolution) -> Result<(DMatrix<f64>, usize)> {
    let (m, mp) = (sol.mu.len(), sol.nu.len());
    let mut h = DMatrix::zeros(m, mp);
    let mut outside = 0;
    for i in 0..cloud.len() {
        match (sol.mu.cell_of(cloud.xs().row(i)), sol.nu.cell_of(cloud.ys().row(i))) {
            (Some(a), Some(b)) => h[(a, b)] += 1.0,
            _ => outside += 1,
        }
    }
    if outside as f64 > MAX_OUTSIDE_FRACTION * cloud.len() as f64 {
        return Err(Error::OutsideGrid {
            outside,
            total: cloud.len(),
        });
    }
    let inside = (cloud.len() - outside) as f64;
    if inside == 0.0 {
        return Err(Error::Empty("histogram"));
    }
    h /= inside;
    Ok((h, outside))
}

/// Discrete relative entropy of the cloud's histogram against the grid
/// coupling, `0 log 0 = 0`, infinite when a visited cell has no reference mass.
pub fn entropy_vs_pi_histogram(cloud: &ParticleCloud, sol: &SinkhornSolution) -> Result<EntropyEstimate> {
    let (h, _) = grid_histogram(cloud, sol)?;
    Ok(EntropyEstimate {
        value: crate::sinkhorn::relative_entropy(&h, &sol.coupling),
        method: EntropyMethod::Histogram,
    })
}

/// Exact `W_2` between two weighted point sets on the line.
pub fn w2_discrete_1d(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let sorted = |v: &[f64], w: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let total: f64 = w.iter().sum();
        idx.into_iter().map(|i| (v[i], w[i] / total)).collect::<Vec<_>>()
    };
    let (sa, sb) = (sorted(a, wa), sorted(b, wb));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (sa[0].1, sb[0].1);
    let mut cost = 0.0;
    while i < sa.len() && j < sb.len() {
        let mass = ra.min(rb);
        cost += mass * (sa[i].0 - sb[j].0).powi(2);
        ra -= mass;
        rb -= mass;
        if ra <= 1e-300 {
            i += 1;
            if i < sa.len() {
                ra = sa[i].1;
            }
        }
        if rb <= 1e-300 {
            j += 1;
            if j < sb.len() {
                rb = sb[j].1;
            }
        }
    }
    Ok(cost.max(0.0).sqrt())
}

/// `W_2` between the empirical law of `samples` and a one-dimensional grid measure.
pub fn w2_to_grid_1d(samples: &[f64], grid: &GridMeasure) -> Result<f64> {
    if grid.dim() != 1 {
        return Err(Error::Unsupported("quantile W2 needs d = 1".into()));
    }
    let w = vec![1.0; samples.len()];
    w2_discrete_1d(samples, &w, grid.nodes.as_slice(), &grid.weights)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Bures-Wasserstein distance between Gaussians: the `W_2` surrogate used for
/// couplings in dimension above one.
pub fn bures_w2(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    if c1.shape() != c2.shape() || m1.len() != m2.len() || m1.len() != c1.nrows() {
        return Err(Error::DimensionMismatch {
            expected: c1.nrows(),
            got: c2.nrows(),
        });
    }
    let r = sqrt_psd(c2);
    let cross = sqrt_psd(&(&r * c1 * &r));
    let v = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0).sqrt())
}

/// One row of the diagnostics table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub t: f64,
    /// `|mean - E_mu|` per slot and coordinate.
    pub mean_deviation: Vec<Vec<f64>>,
    pub variance_deviation: Vec<Vec<f64>>,
    /// Largest KS statistic over coordinates of each slot.
    pub ks: Vec<Option<f64>>,
    /// Empirical `E[X Y^T]` (first two slots).
    pub cross: DMatrix<f64>,
    pub energy: Option<f64>,
    pub entropy: Option<EntropyEstimate>,
    pub drift: Option<DriftDiscrepancy>,
    /// `W_2` to the reference: exact per marginal in one dimension (first two
    /// entries), Bures surrogate for the joint law (last entry).
    pub w2: Option<Vec<f64>>,
}

/// Reference used to compute entropy and drift diagnostics.
#[derive(Clone, Debug)]
pub enum Reference {
    Gaussian(RiccatiState),
    Grid(SinkhornSolution),
    None,
}

#[derive(Clone, Debug)]
pub struct DiagnosticsReport {
    pub records: Vec<CheckpointRecord>,
    pub ks_critical: f64,
}

impl DiagnosticsReport {
    pub fn from_trajectory(
        traj: &Trajectory,
        problem: &Problem,
        est: &CondExpEstimator,
        reference: &Reference,
    ) -> Result<Self> {
        let drift_ref = match reference {
            Reference::Gaussian(s) if problem.cost == CostSpec::Quadratic => Some(DriftReference::gaussian(s)?),
            Reference::Grid(sol) => Some(DriftReference::from_grid(sol)?),
            _ => None,
        };
        let mut records = Vec::new();
        for cloud in &traj.checkpoints {
            records.push(checkpoint_record(cloud, problem, est, reference, drift_ref.as_ref())?);
        }
        let n = traj.checkpoints.first().map_or(1, |c| c.len());
        Ok(Self {
            records,
            ks_critical: ks_critical_1pct(n),
        })
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "t,max_mean_dev,max_var_dev,max_ks,ks_critical,cross_00,energy,entropy,entropy_method,drift_phi,drift_psi,w2_x,w2_y,w2_joint"
        )?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.16e}"));
        for r in &self.records {
            let max_of = |v: &Vec<Vec<f64>>| v.iter().flatten().copied().fold(0.0f64, f64::max);
            let ks = r.ks.iter().try_fold(0.0f64, |a, k| k.map(|k| a.max(k)));
            let (w2x, w2y, w2j) = match &r.w2 {
                Some(v) if v.len() == 3 => (Some(v[0]), Some(v[1]), Some(v[2])),
                Some(v) if v.len() == 1 => (None, None, Some(v[0])),
                _ => (None, None, None),
            };
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{},{},{},{},{},{},{},{}",
                r.t,
                max_of(&r.mean_deviation),
                max_of(&r.variance_deviation),
                opt(ks),
                self.ks_critical,
                r.cross[(0, 0)],
                opt(r.energy),
                opt(r.entropy.map(|e| e.value)),
                r.entropy.map_or("", |e| match e.method {
                    EntropyMethod::ClosedForm => "closed-form",
                    EntropyMethod::Histogram => "histogram",
                }),
                opt(r.drift.map(|d| d.phi)),
                opt(r.drift.map(|d| d.psi)),
                opt(w2x),
                opt(w2y),
                opt(w2j),
            )?;
        }
        Ok(())
    }
}

fn checkpoint_record(
    cloud: &ParticleCloud,
    problem: &Problem,
    est: &CondExpEstimator,
    reference: &Reference,
    drift_ref: Option<&DriftReference>,
) -> Result<CheckpointRecord> {
    let marg = marginal_tests(cloud, &problem.marginals)?;
    let mut mean_deviation = Vec::new();
    let mut variance_deviation = Vec::new();
    for (slot, spec) in cloud.slots.iter().zip(&problem.marginals) {
        let mean = slot.mean();
        let (mut md, mut vd) = (Vec::new(), Vec::new());
        for (k, m) in mean.iter().enumerate() {
            let (em, ev) = spec.coordinate_moments(k);
            let var = slot.column(k).iter().map(|x| (x - m).powi(2)).sum::<f64>() / slot.len() as f64;
            md.push((m - em).abs());
            vd.push((var - ev).abs());
        }
        mean_deviation.push(md);
        variance_deviation.push(vd);
    }
    let ks = marg
        .coordinates
        .iter()
        .map(|c| c.iter().try_fold(0.0f64, |a, t| t.ks.map(|k| a.max(k))))
        .collect();
    let two = cloud.slots.len() == 2;
    let (joint_mean, joint_cov) = joint_moments(cloud);
    let d = cloud.dim();
    let cross = cloud.slots[0].cross_moment(&cloud.slots[1]);
    let (energy, entropy, w2) = match reference {
        Reference::Gaussian(pi) if two => {
            let sigma = joint_cov.view((0, d), (d, d)).into_owned();
            let state = pi.with_sigma(sigma);
            let energy = gaussian_energy(&state).ok();
            let c_inf = pi.joint_covariance();
            let w2 = bures_w2(&joint_mean, &joint_cov, &DVector::zeros(2 * d), &c_inf)?;
            (energy, Some(entropy_vs_pi_gaussian(cloud, pi)?), Some(vec![w2]))
        }
        Reference::Grid(sol) if two => {
            let (h, _) = grid_histogram(cloud, sol)?;
            let energy = crate::sinkhorn::energy(&h, &sol.mu, &sol.nu, &sol.cost, sol.epsilon);
            let ent = crate::sinkhorn::relative_entropy(&h, &sol.coupling);
            let mut w2 = Vec::new();
            if d == 1 {
                w2.push(w2_to_grid_1d(cloud.xs().as_slice(), &sol.mu)?);
                w2.push(w2_to_grid_1d(cloud.ys().as_slice(), &sol.nu)?);
            }
            let (pm, pc) = grid_joint_moments(sol);
            w2.push(bures_w2(&joint_mean, &joint_cov, &pm, &pc)?);
            (
                Some(energy),
                Some(EntropyEstimate {
                    value: ent,
                    method: EntropyMethod::Histogram,
                }),
                Some(w2),
            )
        }
        _ => (None, None, None),
    };
    let drift = match drift_ref {
        Some(r) if two => Some(drift_discrepancy(cloud, &problem.cost, est, r)?),
        _ => None,
    };
    Ok(CheckpointRecord {
        t: cloud.t,
        mean_deviation,
        variance_deviation,
        ks,
        cross,
        energy,
        entropy,
        drift,
        w2,
    })
}

/// Mean and covariance of the stacked pair under the grid coupling.
pub fn grid_joint_moments(sol: &SinkhornSolution) -> (DVector<f64>, DMatrix<f64>) {
    let d = sol.mu.dim();
    let w = 2 * d;
    let mut mean = DVector::zeros(w);
    let mut second = DMatrix::zeros(w, w);
    let mut z = vec![0.0; w];
    for i in 0..sol.mu.len() {
        for j in 0..sol.nu.len() {
            let p = sol.coupling[(i, j)];
            z[..d].copy_from_slice(sol.mu.nodes.row(i));
            z[d..].copy_from_slice(sol.nu.nodes.row(j));
            for a in 0..w {
                mean[a] += p * z[a];
                for b in 0..w {
                    second[(a, b)] += p * z[a] * z[b];
                }
            }
        }
    }
    let cov = second - &mean * mean.transpose();
    (mean, cov)
}

/// Checks that `cloud` and `reference` agree on the marginal slot count.
pub fn check_reference_dim(reference: &Reference, d: usize) -> Result<()> {
    let got = match reference {
        Reference::Gaussian(s) => s.dim(),
        Reference::Grid(sol) => sol.mu.dim(),
        Reference::None => return Ok(()),
    };
    if got != d {
        return Err(invalid("reference", format!("dimension {got} does not match problem dimension {d}")));
    }
    Ok(())
}
