//! Entropic optimal transport between discretized marginals, solved by
//! log-domain Sinkhorn iterations. Serves as the reference coupling for the
//! particle system.

use crate::error::{invalid, Error, Result};
use crate::model::{CostSpec, PotentialSpec};
use crate::points::Points;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;

/// Columns handled per task in column reductions.
const COLUMN_BLOCK: usize = 64;

/// One axis of a regular grid: `count` cells of equal width over `[lo, hi]`,
/// with nodes at the cell midpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid("axis", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        if count == 0 {
            return Err(invalid("axis", "need at least one cell"));
        }
        Ok(Self { lo, hi, count })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.step()
    }

    /// Cell containing `x`, if inside `[lo, hi]`.
    pub fn cell(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        Some((((x - self.lo) / self.step()) as usize).min(self.count - 1))
    }
}

/// Probability weights on a finite set of nodes. Grids built on a box keep
/// their axes (last coordinate varies fastest) for interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    pub nodes: Points,
    pub weights: Vec<f64>,
    pub cell_volume: f64,
    pub axes: Option<Vec<Axis>>,
}

fn normalise(weights: &mut [f64]) -> Result<()> {
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid("weights", format!("entry {i} is {}", weights[i])));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("weights", "total mass is zero"));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}

impl GridMeasure {
    /// Arbitrary nodes with the given (renormalised) weights.
    pub fn discrete(nodes: Points, mut weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: nodes.len(),
                got: weights.len(),
            });
        }
        if nodes.is_empty() {
            return Err(Error::Empty("nodes"));
        }
        normalise(&mut weights)?;
        Ok(Self {
            nodes,
            weights,
            cell_volume: 1.0,
            axes: None,
        })
    }

    /// Regular grid on a box, weighted by `density` at the cell midpoints.
    pub fn on_box(axes: Vec<Axis>, density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Empty("axes"));
        }
        let d = axes.len();
        let total: usize = axes.iter().map(|a| a.count).product();
        let mut data = Vec::with_capacity(total * d);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            data.extend(idx.iter().zip(&axes).map(|(&i, a)| a.node(i)));
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].count {
                    break;
                }
                idx[k] = 0;
            }
        }
        let nodes = Points::new(d, data)?;
        let mut weights: Vec<f64> = nodes.rows().map(&density).collect();
        normalise(&mut weights)?;
        Ok(Self {
            nodes,
            weights,
            cell_volume: axes.iter().map(Axis::step).product(),
            axes: Some(axes),
        })
    }

    /// Grid over mean ± 6 standard deviations per coordinate.
    pub fn from_potential(spec: &PotentialSpec, count: usize) -> Result<Self> {
        let axes = (0..spec.dim())
            .map(|k| {
                let (m, v) = spec.coordinate_moments(k);
                let sd = v.sqrt();
                Axis::new(m - 6.0 * sd, m + 6.0 * sd, count)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::on_box(axes, |x| spec.density(x))
    }

    /// 256 nodes in one dimension, 64 per axis in two.
    pub fn default_count(dim: usize) -> Result<usize> {
        match dim {
            1 => Ok(256),
            2 => Ok(64),
            d => Err(Error::Unsupported(format!("grid reference in dimension {d}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.dim()
    }

    fn axes_or_err(&self) -> Result<&[Axis]> {
        self.axes
            .as_deref()
            .ok_or_else(|| Error::Unsupported("operation needs a regular grid".into()))
    }

    /// Flat index of the cell containing `x`.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let axes = self.axes.as_ref()?;
        let mut flat = 0;
        for (a, &v) in axes.iter().zip(x) {
            flat = flat * a.count + a.cell(v)?;
        }
        Some(flat)
    }

    /// Multilinear interpolation of nodal `values` at `x`, clamped to the
    /// node range. The flag is false when `x` lies outside the box.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<(f64, bool)> {
        let axes = self.axes_or_err()?;
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let d = axes.len();
        let mut inside = true;
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let a = &axes[k];
            if !(x[k] >= a.lo && x[k] <= a.hi) {
                inside = false;
            }
            let u = ((x[k] - a.lo) / a.step() - 0.5).clamp(0.0, (a.count - 1) as f64);
            let i = (u.floor() as usize).min(a.count.saturating_sub(2));
            base[k] = i;
            frac[k] = if a.count > 1 { u - i as f64 } else { 0.0 };
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let up = (corner >> (d - 1 - k)) & 1;
                let i = (base[k] + up).min(axes[k].count - 1);
                weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
                flat = flat * axes[k].count + i;
            }
            if weight != 0.0 {
                acc += weight * values[flat];
            }
        }
        Ok((acc, inside))
    }
}

/// Row-major `M x M'` matrix of cost values.
fn cost_matrix(mu: &GridMeasure, nu: &GridMeasure, cost: &CostSpec) -> Vec<f64> {
    let mp = nu.len();
    let mut c = vec![0.0; mu.len() * mp];
    c.par_chunks_mut(mp).enumerate().for_each(|(i, row)| {
        let x = mu.nodes.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = cost.value(x, nu.nodes.row(j));
        }
    });
    c
}

fn lse(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + vals.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// `-eps * log sum_j exp((g_j - C_ij)/eps + log w_j)` for every row `i`.
fn row_update(c: &[f64], g: &[f64], log_w: &[f64], eps: f64) -> Vec<f64> {
    let mp = g.len();
    c.par_chunks(mp)
        .map(|row| {
            -eps * lse(row.iter().zip(g).zip(log_w).map(|((cij, gj), lw)| (gj - cij) / eps + lw))
        })
        .collect()
}

/// Same as [`row_update`] over columns.
fn column_update(c: &[f64], f: &[f64], log_w: &[f64], eps: f64, mp: usize) -> Vec<f64> {
    let starts: Vec<usize> = (0..mp).step_by(COLUMN_BLOCK).collect();
    let blocks: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&j0| {
            let j1 = (j0 + COLUMN_BLOCK).min(mp);
            let width = j1 - j0;
            let mut top = vec![f64::NEG_INFINITY; width];
            for (i, row) in c.chunks_exact(mp).enumerate() {
                let base = f[i] / eps + log_w[i];
                for (t, cij) in top.iter_mut().zip(&row[j0..j1]) {
                    *t = t.max(base - cij / eps);
                }
            }
            let mut sum = vec![0.0; width];
            for (i, row) in c.chunks_exact(mp).enumerate() {
                let base = f[i] / eps + log_w[i];
                for ((s, t), cij) in sum.iter_mut().zip(&top).zip(&row[j0..j1]) {
                    *s += (base - cij / eps - t).exp();
                }
            }
            top.iter().zip(&sum).map(|(t, s)| -eps * (t + s.ln())).collect()
        })
        .collect();
    blocks.concat()
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// `pi[(i, j)] = exp((phi_i + psi_j - c_ij)/eps) mu_i nu_j`.
    pub coupling: DMatrix<f64>,
    pub epsilon: f64,
    /// Max-norm of the log row-sum ratios after each iteration; column sums
    /// are exact after every iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub mu: GridMeasure,
    pub nu: GridMeasure,
    pub cost: CostSpec,
}

pub fn sinkhorn(
    mu: &GridMeasure,
    nu: &GridMeasure,
    cost: &CostSpec,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution> {
    sinkhorn_from(mu, nu, cost, epsilon, tol, max_iter, None)
}

/// Sinkhorn started from a given `psi` (zero by default).
pub fn sinkhorn_from(
    mu: &GridMeasure,
    nu: &GridMeasure,
    cost: &CostSpec,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
    psi0: Option<&[f64]>,
) -> Result<SinkhornSolution> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {tol}")));
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    for m in [mu, nu] {
        if let Some(i) = m.weights.iter().position(|&w| w <= 0.0) {
            return Err(Error::ZeroMass(i));
        }
    }
    let mp = nu.len();
    let c = cost_matrix(mu, nu, cost);
    let log_mu: Vec<f64> = mu.weights.iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = nu.weights.iter().map(|w| w.ln()).collect();
    let mut psi = match psi0 {
        Some(p) if p.len() == mp => p.to_vec(),
        Some(p) => {
            return Err(Error::DimensionMismatch {
                expected: mp,
                got: p.len(),
            })
        }
        None => vec![0.0; mp],
    };
    let mut phi = row_update(&c, &psi, &log_nu, epsilon);
    psi = column_update(&c, &phi, &log_mu, epsilon, mp);
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 1;
    loop {
        let next = row_update(&c, &psi, &log_nu, epsilon);
        let res = phi
            .iter()
            .zip(&next)
            .map(|(a, b)| ((a - b) / epsilon).abs())
            .fold(0.0, f64::max);
        residuals.push(res);
        if res < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter || !res.is_finite() {
            break;
        }
        phi = next;
        psi = column_update(&c, &phi, &log_mu, epsilon, mp);
        iterations += 1;
    }
    if !converged {
        log::warn!(
            "sinkhorn stopped after {iterations} iterations with residual {:.3e}",
            residuals.last().copied().unwrap_or(f64::NAN)
        );
    }
    let kappa: f64 = phi.iter().zip(&mu.weights).map(|(p, w)| p * w).sum();
    phi.iter_mut().for_each(|p| *p -= kappa);
    psi.iter_mut().for_each(|p| *p += kappa);
    let coupling = factorised_coupling(&c, &phi, &psi, mu, nu, epsilon);
    Ok(SinkhornSolution {
        phi,
        psi,
        coupling,
        epsilon,
        residuals,
        converged,
        iterations,
        mu: mu.clone(),
        nu: nu.clone(),
        cost: *cost,
    })
}

fn factorised_coupling(c: &[f64], phi: &[f64], psi: &[f64], mu: &GridMeasure, nu: &GridMeasure, eps: f64) -> DMatrix<f64> {
    let mp = nu.len();
    DMatrix::from_fn(mu.len(), mp, |i, j| {
        ((phi[i] + psi[j] - c[i * mp + j]) / eps).exp() * mu.weights[i] * nu.weights[j]
    })
}

impl SinkhornSolution {
    /// Same solution with `phi + kappa`, `psi - kappa`, coupling rebuilt from
    /// the factorisation.
    pub fn shifted(&self, kappa: f64) -> Self {
        let mut out = self.clone();
        out.phi.iter_mut().for_each(|p| *p += kappa);
        out.psi.iter_mut().for_each(|p| *p -= kappa);
        let c = cost_matrix(&self.mu, &self.nu, &self.cost);
        out.coupling = factorised_coupling(&c, &out.phi, &out.psi, &self.mu, &self.nu, self.epsilon);
        out
    }

    /// `int exp((phi + psi - c)/eps) d nu - 1` at each `mu` node and the
    /// symmetric quantity at each `nu` node.
    pub fn schrodinger_residuals(&self) -> (Vec<f64>, Vec<f64>) {
        let rows = (0..self.mu.len())
            .map(|i| self.coupling.row(i).sum() / self.mu.weights[i] - 1.0)
            .collect();
        let cols = (0..self.nu.len())
            .map(|j| self.coupling.column(j).sum() / self.nu.weights[j] - 1.0)
            .collect();
        (rows, cols)
    }

    /// `E_pi[X Y^T]`.
    pub fn cross_moment(&self) -> DMatrix<f64> {
        let d = self.mu.dim();
        let mut m = DMatrix::zeros(d, d);
        for j in 0..self.nu.len() {
            let y = self.nu.nodes.row(j);
            for i in 0..self.mu.len() {
                let p = self.coupling[(i, j)];
                let x = self.mu.nodes.row(i);
                for a in 0..d {
                    for b in 0..d {
                        m[(a, b)] += p * x[a] * y[b];
                    }
                }
            }
        }
        m
    }
}

/// `E_pi[grad_x c(X, Y) | X = x_i]` at every `mu` node; equals `grad phi`.
pub fn grad_phi_via_conditional(sol: &SinkhornSolution, cost: &CostSpec) -> Result<Points> {
    conditional_cost_gradient(sol, cost, true)
}

/// `E_pi[grad_y c(X, Y) | Y = y_j]` at every `nu` node; equals `grad psi`.
pub fn grad_psi_via_conditional(sol: &SinkhornSolution, cost: &CostSpec) -> Result<Points> {
    conditional_cost_gradient(sol, cost, false)
}

fn conditional_cost_gradient(sol: &SinkhornSolution, cost: &CostSpec, rows: bool) -> Result<Points> {
    let d = sol.mu.dim();
    let (own, other) = if rows { (&sol.mu, &sol.nu) } else { (&sol.nu, &sol.mu) };
    let mut out = Points::zeros(own.len(), d);
    let mut g = vec![0.0; d];
    for a in 0..own.len() {
        let mut mass = 0.0;
        let acc = out.row_mut(a);
        for b in 0..other.len() {
            let p = if rows { sol.coupling[(a, b)] } else { sol.coupling[(b, a)] };
            if rows {
                cost.grad_x_into(own.nodes.row(a), other.nodes.row(b), &mut g);
            } else {
                cost.grad_y_into(other.nodes.row(b), own.nodes.row(a), &mut g);
            }
            mass += p;
            for (s, v) in acc.iter_mut().zip(&g) {
                *s += p * v;
            }
        }
        if !(mass > 0.0) {
            return Err(Error::ZeroMass(a));
        }
        acc.iter_mut().for_each(|s| *s /= mass);
    }
    Ok(out)
}

/// Rescales rows and columns of a positive matrix until its marginals match
/// `row_w` and `col_w` to `tol` in max-norm.
pub fn project_to_marginals(p: &DMatrix<f64>, row_w: &[f64], col_w: &[f64], tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    if p.nrows() != row_w.len() || p.ncols() != col_w.len() {
        return Err(Error::DimensionMismatch {
            expected: row_w.len() * col_w.len(),
            got: p.nrows() * p.ncols(),
        });
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("coupling", "entries must be finite and nonnegative"));
    }
    let mut q = p.clone();
    for _ in 0..max_iter {
        for (i, w) in row_w.iter().enumerate() {
            let s = q.row(i).sum();
            if !(s > 0.0) {
                return Err(Error::ZeroMass(i));
            }
            q.row_mut(i).scale_mut(w / s);
        }
        let mut err: f64 = 0.0;
        for (j, w) in col_w.iter().enumerate() {
            let s = q.column(j).sum();
            if !(s > 0.0) {
                return Err(Error::ZeroMass(j));
            }
            q.column_mut(j).scale_mut(w / s);
        }
        for (i, w) in row_w.iter().enumerate() {
            err = err.max((q.row(i).sum() - w).abs());
        }
        if err < tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// `pi` multiplied by `exp(h)` for a random smooth `h` of the given
/// amplitude, then projected back to the marginals of `pi`.
pub fn perturbed_coupling(sol: &SinkhornSolution, rng: &mut impl Rng, amplitude: f64) -> Result<DMatrix<f64>> {
    let d = sol.mu.dim();
    let terms: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let kx: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let ky: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            (kx, ky, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-1.0..1.0))
        })
        .collect();
    let p = DMatrix::from_fn(sol.mu.len(), sol.nu.len(), |i, j| {
        let x = sol.mu.nodes.row(i);
        let y = sol.nu.nodes.row(j);
        let h: f64 = terms
            .iter()
            .map(|(kx, ky, phase, a)| {
                let arg: f64 = kx.iter().zip(x).map(|(k, v)| k * v).sum::<f64>()
                    + ky.iter().zip(y).map(|(k, v)| k * v).sum::<f64>()
                    + phase;
                a * arg.sin()
            })
            .sum();
        sol.coupling[(i, j)] * (amplitude * h).exp()
    });
    let rows: Vec<f64> = (0..sol.mu.len()).map(|i| sol.coupling.row(i).sum()).collect();
    let cols: Vec<f64> = (0..sol.nu.len()).map(|j| sol.coupling.column(j).sum()).collect();
    project_to_marginals(&p, &rows, &cols, 1e-15, 100_000)
}

/// Discrete `sum p log(p/q)` with `0 log 0 = 0`; infinite if `p > 0 = q`.
pub fn relative_entropy(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let mut h = 0.0;
    for (a, b) in p.iter().zip(q.iter()) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return f64::INFINITY;
            }
            h += a * (a / b).ln();
        }
    }
    h.max(0.0)
}

/// `int c dP + eps H(P | mu x nu)` on the grid.
pub fn energy(p: &DMatrix<f64>, mu: &GridMeasure, nu: &GridMeasure, cost: &CostSpec, eps: f64) -> f64 {
    let mut transport = 0.0;
    let mut ent = 0.0;
    for j in 0..nu.len() {
        for i in 0..mu.len() {
            let v = p[(i, j)];
            if v > 0.0 {
                transport += v * cost.value(mu.nodes.row(i), nu.nodes.row(j));
                ent += v * (v / (mu.weights[i] * nu.weights[j])).ln();
            }
        }
    }
    transport + eps * ent
}

/// Returns `(J(P) - J(pi), eps H(P | pi))`.
pub fn pythagoras_check(p: &DMatrix<f64>, sol: &SinkhornSolution) -> Result<(f64, f64)> {
    check_marginals(p, sol, 1e-10)?;
    let lhs = energy(p, &sol.mu, &sol.nu, &sol.cost, sol.epsilon)
        - energy(&sol.coupling, &sol.mu, &sol.nu, &sol.cost, sol.epsilon);
    let rhs = sol.epsilon * relative_entropy(p, &sol.coupling);
    Ok((lhs, rhs))
}

fn check_marginals(p: &DMatrix<f64>, sol: &SinkhornSolution, tol: f64) -> Result<()> {
    if p.nrows() != sol.mu.len() || p.ncols() != sol.nu.len() {
        return Err(Error::DimensionMismatch {
            expected: sol.mu.len() * sol.nu.len(),
            got: p.nrows() * p.ncols(),
        });
    }
    let row_err = (0..p.nrows())
        .map(|i| (p.row(i).sum() - sol.coupling.row(i).sum()).abs())
        .fold(0.0, f64::max);
    let col_err = (0..p.ncols())
        .map(|j| (p.column(j).sum() - sol.coupling.column(j).sum()).abs())
        .fold(0.0, f64::max);
    if row_err.max(col_err) > tol {
        return Err(invalid(
            "coupling",
            format!("marginals differ from the reference by {:.3e}", row_err.max(col_err)),
        ));
    }
    Ok(())
}

/// Finite-difference gradients of `log(P/pi)` along each axis (d = 1).
fn log_ratio_gradients(p: &DMatrix<f64>, sol: &SinkhornSolution) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ax = sol.mu.axes_or_err()?;
    let ay = sol.nu.axes_or_err()?;
    if ax.len() != 1 {
        return Err(Error::Unsupported("grid Fisher information needs d = 1".into()));
    }
    let (m, mp) = (p.nrows(), p.ncols());
    if m < 2 || mp < 2 {
        return Err(invalid("grid", "need at least two nodes per axis"));
    }
    if m != sol.mu.len() || mp != sol.nu.len() {
        return Err(Error::DimensionMismatch {
            expected: sol.mu.len() * sol.nu.len(),
            got: m * mp,
        });
    }
    let mut r = DMatrix::zeros(m, mp);
    for j in 0..mp {
        for i in 0..m {
            let (a, b) = (p[(i, j)], sol.coupling[(i, j)]);
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::ZeroMass(i * mp + j));
            }
            r[(i, j)] = (a / b).ln();
        }
    }
    // Central differences inside, one-sided at the edges.
    let diff = |lo: usize, hi: usize, h: f64| (hi - lo) as f64 * h;
    let (hx, hy) = (ax[0].step(), ay[0].step());
    let gx = DMatrix::from_fn(m, mp, |i, j| {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(m - 1));
        (r[(hi, j)] - r[(lo, j)]) / diff(lo, hi, hx)
    });
    let gy = DMatrix::from_fn(m, mp, |i, j| {
        let (lo, hi) = (j.saturating_sub(1), (j + 1).min(mp - 1));
        (r[(i, hi)] - r[(i, lo)]) / diff(lo, hi, hy)
    });
    Ok((gx, gy))
}

/// Grid version of the projected Fisher information: conditional variances of
/// the finite-difference gradients of `log(P/pi)`, given the own coordinate,
/// averaged under `P`.
pub fn projected_fisher_grid(p: &DMatrix<f64>, sol: &SinkhornSolution) -> Result<f64> {
    let (gx, gy) = log_ratio_gradients(p, sol)?;
    let (m, mp) = (p.nrows(), p.ncols());
    let mut total = 0.0;
    for i in 0..m {
        let mass = p.row(i).sum();
        let mean = (0..mp).map(|j| p[(i, j)] * gx[(i, j)]).sum::<f64>() / mass;
        total += (0..mp).map(|j| p[(i, j)] * (gx[(i, j)] - mean).powi(2)).sum::<f64>();
    }
    for j in 0..mp {
        let mass = p.column(j).sum();
        let mean = (0..m).map(|i| p[(i, j)] * gy[(i, j)]).sum::<f64>() / mass;
        total += (0..m).map(|i| p[(i, j)] * (gy[(i, j)] - mean).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Grid relative Fisher information `E_P |grad log(P/pi)|^2`.
pub fn fisher_grid(p: &DMatrix<f64>, sol: &SinkhornSolution) -> Result<f64> {
    let (gx, gy) = log_ratio_gradients(p, sol)?;
    Ok(p.iter()
        .zip(gx.iter().zip(gy.iter()))
        .map(|(w, (a, b))| w * (a * a + b * b))
        .sum())
}

/// Rows `side,coord_0..,potential` for both grids.
pub fn write_potentials_csv(sol: &SinkhornSolution, mut w: impl Write) -> Result<()> {
    let d = sol.mu.dim();
    let coords: Vec<String> = (0..d).map(|k| format!("x_{k}")).collect();
    writeln!(w, "side,index,{},weight,potential", coords.join(","))?;
    for (side, grid, pot) in [("mu", &sol.mu, &sol.phi), ("nu", &sol.nu, &sol.psi)] {
        for i in 0..grid.len() {
            let xs: Vec<String> = grid.nodes.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(
                w,
                "{side},{i},{},{:.16e},{:.16e}",
                xs.join(","),
                grid.weights[i],
                pot[i]
            )?;
        }
    }
    Ok(())
}

/// Little-endian `M: u64`, `M': u64`, `eps: f64`, then the coupling row by row.
pub fn write_coupling_binary(sol: &SinkhornSolution, mut w: impl Write) -> Result<()> {
    let (m, mp) = (sol.coupling.nrows(), sol.coupling.ncols());
    w.write_all(&(m as u64).to_le_bytes())?;
    w.write_all(&(mp as u64).to_le_bytes())?;
    w.write_all(&sol.epsilon.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m * mp * 8);
    for i in 0..m {
        for j in 0..mp {
            buf.extend_from_slice(&sol.coupling[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RngStream;

    fn gaussian_solution(eps: f64, count: usize) -> SinkhornSolution {
        let g = GridMeasure::from_potential(&PotentialSpec::standard_normal(1), count).unwrap();
        sinkhorn(&g, &g, &CostSpec::Quadratic, eps, 1e-13, 100_000).unwrap()
    }

    #[test]
    fn two_point_coupling_matches_closed_form() {
        let nodes = Points::from_scalars(vec![0.0, 1.0]);
        let g = GridMeasure::discrete(nodes, vec![1.0, 1.0]).unwrap();
        for eps in [0.3, 1e3, 1e5] {
            let sol = sinkhorn(&g, &g, &CostSpec::Quadratic, eps, 1e-14, 1000).unwrap();
            assert!(sol.converged);
            // Diagonal mass a solves a / (1/2 - a) = exp(c/eps) with c = 1/2.
            let r = (0.5f64 / eps).exp();
            let a = 0.5 * r / (1.0 + r);
            assert!((sol.coupling[(0, 0)] - a).abs() < 1e-12);
            assert!((sol.coupling[(0, 1)] - (0.5 - a)).abs() < 1e-12);
            if eps >= 1e5 {
                assert!(sol.coupling.iter().all(|v| (v - 0.25).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn grid_weights_and_nodes() {
        let g = GridMeasure::from_potential(&PotentialSpec::standard_normal(1), 256).unwrap();
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ax = g.axes.as_ref().unwrap()[0];
        assert!((ax.lo + 6.0).abs() < 1e-15 && (ax.hi - 6.0).abs() < 1e-15);
        assert!(g.nodes.as_slice().iter().all(|&x| x > ax.lo && x < ax.hi));
        assert!((g.cell_volume - 12.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn grid_2d_ordering() {
        let axes = vec![Axis::new(0.0, 2.0, 2).unwrap(), Axis::new(0.0, 3.0, 3).unwrap()];
        let g = GridMeasure::on_box(axes, |_| 1.0).unwrap();
        assert_eq!(g.nodes.row(1), &[0.5, 1.5]);
        assert_eq!(g.nodes.row(3), &[1.5, 0.5]);
        assert_eq!(g.cell_of(&[1.2, 2.9]), Some(5));
        let vals: Vec<f64> = g.nodes.rows().map(|x| 2.0 * x[0] - x[1] + 1.0).collect();
        let (v, inside) = g.interpolate(&vals, &[1.0, 1.2]).unwrap();
        assert!(inside);
        assert!((v - (2.0 - 1.2 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn residuals_nonincreasing() {
        let sol = gaussian_solution(0.5, 128);
        assert!(sol.converged);
        for w in sol.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-14, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn schrodinger_equations_and_gauge() {
        let sol = gaussian_solution(0.5, 128);
        let (r, c) = sol.schrodinger_residuals();
        assert!(r.iter().chain(&c).all(|v| v.abs() < 1e-10));
        let mean_phi: f64 = sol.phi.iter().zip(&sol.mu.weights).map(|(a, b)| a * b).sum();
        assert!(mean_phi.abs() < 1e-12);
    }

    #[test]
    fn gauge_shift_keeps_coupling() {
        let sol = gaussian_solution(0.5, 64);
        let moved = sol.shifted(0.37);
        for (a, b) in sol.coupling.iter().zip(moved.coupling.iter()) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn quadratic_gradient_is_x_minus_conditional_mean() {
        let sol = gaussian_solution(0.5, 64);
        let g = grad_phi_via_conditional(&sol, &CostSpec::Quadratic).unwrap();
        for i in 0..sol.mu.len() {
            let x = sol.mu.nodes.row(i)[0];
            let row = sol.coupling.row(i);
            let cm = (0..sol.nu.len()).map(|j| row[j] * sol.nu.nodes.row(j)[0]).sum::<f64>() / row.sum();
            assert!((g.row(i)[0] - (x - cm)).abs() < 1e-12);
        }
        // Symmetric problem: the gradient is odd.
        let m = sol.mu.len();
        for i in 0..m / 2 {
            assert!((g.row(i)[0] + g.row(m - 1 - i)[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn pythagoras_trivial_and_product() {
        let sol = gaussian_solution(0.5, 64);
        let (l, r) = pythagoras_check(&sol.coupling.clone(), &sol).unwrap();
        assert!(l.abs() < 1e-12 && r.abs() < 1e-12);
        let rows: Vec<f64> = (0..sol.mu.len()).map(|i| sol.coupling.row(i).sum()).collect();
        let cols: Vec<f64> = (0..sol.nu.len()).map(|j| sol.coupling.column(j).sum()).collect();
        let prod = DMatrix::from_fn(rows.len(), cols.len(), |i, j| rows[i] * cols[j]);
        let (l, r) = pythagoras_check(&prod, &sol).unwrap();
        assert!((l - r).abs() < 1e-10, "{l} vs {r}");
    }

    #[test]
    fn fisher_of_reference_is_zero_and_projected_below_full() {
        let sol = gaussian_solution(0.5, 64);
        assert!(projected_fisher_grid(&sol.coupling, &sol).unwrap() < 1e-18);
        let mut rng = RngStream::new(9).rng();
        for _ in 0..5 {
            let p = perturbed_coupling(&sol, &mut rng, 0.5).unwrap();
            let proj = projected_fisher_grid(&p, &sol).unwrap();
            let full = fisher_grid(&p, &sol).unwrap();
            assert!(proj >= 0.0 && proj <= full + 1e-12);
        }
    }

    #[test]
    fn separable_density_ratio_has_zero_projected_fisher() {
        let sol = gaussian_solution(0.5, 128);
        let p = DMatrix::from_fn(sol.mu.len(), sol.nu.len(), |i, j| {
            let (x, y) = (sol.mu.nodes.row(i)[0], sol.nu.nodes.row(j)[0]);
            sol.coupling[(i, j)] * (0.3 * x).exp() * (1.0 + 0.2 * (y).sin())
        });
        let rows: Vec<f64> = sol.mu.weights.clone();
        let cols: Vec<f64> = (0..sol.nu.len()).map(|j| sol.coupling.column(j).sum()).collect();
        let p = project_to_marginals(&p, &rows, &cols, 1e-15, 100_000).unwrap();
        assert!(projected_fisher_grid(&p, &sol).unwrap() < 1e-3);
    }

    #[test]
    fn missing_reference_mass_gives_infinite_entropy() {
        let p = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let q = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(relative_entropy(&p, &q), f64::INFINITY);
    }

    #[test]
    fn binary_header() {
        let sol = gaussian_solution(1.0, 8);
        let mut buf = Vec::new();
        write_coupling_binary(&sol, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 64 * 8);
        assert_eq!(u64::from_le_bytes(buf[..8].try_into().unwrap()), 8);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 1.0);
    }
}
