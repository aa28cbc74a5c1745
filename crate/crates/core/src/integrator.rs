//! Euler-Maruyama stepping of the interacting particle system. Each particle
//! carries one coordinate block per marginal ("slot"); the standard dynamics
//! use two slots and the multi-marginal variant `m`.

use crate::condexp::{fit_predict, linear_fit, regression_coefficients, CondExpEstimator};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{integrate_riccati, RiccatiState, RiccatiTrajectory};
use crate::model::{sample_joint_gaussian, sample_marginal, CostSpec, PotentialKind, Problem, RngStream};
use crate::points::Points;
use nalgebra::DMatrix;
use rand::Rng;
use rand_pcg::Pcg64;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Standard,
    /// No diffusion and no potential drift. Well-posedness of this equation is
    /// not known; it is exposed for experiments only.
    Noiseless,
    /// Plain Langevin dynamics for `exp(-c/eps) mu x nu`, without the
    /// conditional-expectation correction.
    LangevinUnconstrained,
    MultiMarginal(usize),
}

impl Variant {
    pub fn slots(&self) -> usize {
        match *self {
            Variant::MultiMarginal(m) => m,
            _ => 2,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Variant::Standard => "standard".into(),
            Variant::Noiseless => "noiseless".into(),
            Variant::LangevinUnconstrained => "langevin-unconstrained".into(),
            Variant::MultiMarginal(m) => format!("multimarginal({m})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCoupling {
    /// Independent samples from each marginal.
    Product,
    /// Rank-matched samples (d = 1).
    Comonotone,
    /// Joint Gaussian with the given cross-covariance (Gaussian problems, two slots).
    Gaussian { cross: DMatrix<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub n_particles: usize,
    pub estimator: CondExpEstimator,
    pub seed: u64,
    pub checkpoint_times: Vec<f64>,
    pub variant: Variant,
    pub init: InitialCoupling,
}

impl SimConfig {
    /// Defaults: `dt = min(1e-3, eps/10)`, checkpoints at 0 and the horizon.
    pub fn new(epsilon: f64, horizon: f64, n_particles: usize) -> Self {
        Self {
            epsilon,
            dt: default_dt(epsilon),
            horizon,
            n_particles,
            estimator: CondExpEstimator::ExactLinear,
            seed: 0,
            checkpoint_times: vec![0.0, horizon],
            variant: Variant::Standard,
            init: InitialCoupling::Product,
        }
    }

    /// `count` equally spaced checkpoints ending at the horizon.
    pub fn with_uniform_checkpoints(mut self, count: usize) -> Self {
        self.checkpoint_times = (1..=count)
            .map(|k| self.horizon * k as f64 / count as f64)
            .collect();
        self
    }

    pub fn n_steps(&self) -> usize {
        if self.horizon <= 0.0 || self.dt <= 0.0 {
            return 0;
        }
        (self.horizon / self.dt - 1e-9).ceil() as usize
    }

    /// Time after step `k`; the last step is shortened to land on the horizon.
    pub fn time_at(&self, k: usize) -> f64 {
        if k >= self.n_steps() {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn validate(&self) -> Result<()> {
        let noiseless = self.variant == Variant::Noiseless;
        if !(self.epsilon.is_finite() && (self.epsilon > 0.0 || (noiseless && self.epsilon == 0.0))) {
            return Err(invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(invalid(
                "horizon",
                format!("must be at least dt = {}, got {}", self.dt, self.horizon),
            ));
        }
        if self.n_particles < 2 {
            return Err(invalid("n_particles", format!("need at least 2, got {}", self.n_particles)));
        }
        if let Variant::MultiMarginal(m) = self.variant {
            if m < 2 {
                return Err(invalid("variant", format!("multimarginal needs m >= 2, got {m}")));
            }
        }
        let mut last_step = None;
        for (i, &t) in self.checkpoint_times.iter().enumerate() {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(invalid("checkpoint_times", format!("{t} lies outside [0, {}]", self.horizon)));
            }
            if i > 0 && t <= self.checkpoint_times[i - 1] {
                return Err(invalid("checkpoint_times", "must be strictly increasing"));
            }
            let s = self.step_of(t);
            if last_step == Some(s) {
                return Err(invalid("checkpoint_times", format!("{t} is closer than dt to its predecessor")));
            }
            last_step = Some(s);
        }
        Ok(())
    }

    /// Step index whose time is nearest to `t`.
    fn step_of(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.n_steps())
    }
}

pub fn default_dt(epsilon: f64) -> f64 {
    if epsilon > 0.0 {
        (epsilon / 10.0).min(1e-3)
    } else {
        1e-3
    }
}

/// Paired samples: row `i` of every slot belongs to particle `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub slots: Vec<Points>,
    pub t: f64,
}

impl ParticleCloud {
    pub fn new(xs: Points, ys: Points, t: f64) -> Result<Self> {
        Self::multi(vec![xs, ys], t)
    }

    pub fn multi(slots: Vec<Points>, t: f64) -> Result<Self> {
        let first = slots.first().ok_or(Error::Empty("slots"))?;
        let (n, d) = (first.len(), first.dim());
        for s in &slots {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.dim(),
                });
            }
            if !s.all_finite() {
                return Err(invalid("cloud", "entries must be finite"));
            }
        }
        Ok(Self { slots, t })
    }

    pub fn xs(&self) -> &Points {
        &self.slots[0]
    }

    pub fn ys(&self) -> &Points {
        &self.slots[1]
    }

    pub fn len(&self) -> usize {
        self.slots[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots[0].dim()
    }

    /// Little-endian snapshot: magic `SF`, row width `u16`, `N` as `u32`,
    /// `t` as `f64`, then rows `(X_i, Y_i, ...)` as `f64`.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let width = self.dim() * self.slots.len();
        let width16 = u16::try_from(width).map_err(|_| invalid("cloud", "row too wide for snapshot"))?;
        let n32 = u32::try_from(self.len()).map_err(|_| invalid("cloud", "too many particles for snapshot"))?;
        w.write_all(b"SF")?;
        w.write_all(&width16.to_le_bytes())?;
        w.write_all(&n32.to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * width * 8);
        for i in 0..self.len() {
            for s in &self.slots {
                for v in s.row(i) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// Per-particle Brownian increments. Particle `i` owns substream `i`, so the
/// noise it sees does not depend on scheduling or on the estimator.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rngs: Vec<Pcg64>,
    steps: usize,
}

impl NoiseSource {
    pub fn new(stream: RngStream, n: usize) -> Self {
        Self {
            rngs: (0..n)
                .into_par_iter()
                .map(|i| stream.substream(i as u64).pcg())
                .collect(),
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }
}

/// Gradient of the pairwise-summed cost with respect to slot `s`, for particle `i`.
fn cost_grad_slot(cost: &CostSpec, slots: &[Points], s: usize, i: usize, out: &mut [f64], tmp: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let xs = slots[s].row(i);
    for (j, other) in slots.iter().enumerate() {
        if j == s {
            continue;
        }
        let xj = other.row(i);
        if j > s {
            cost.grad_x_into(xs, xj, tmp);
        } else {
            cost.grad_y_into(xj, xs, tmp);
        }
        for (o, t) in out.iter_mut().zip(tmp.iter()) {
            *o += t;
        }
    }
}

/// Particles per work unit. Fixed so that reductions do not depend on the
/// thread count.
const CHUNK: usize = 4096;

/// Joint mean and centred covariance of the stacked particle `(X_1, ..., X_m)`.
#[derive(Clone, Debug)]
struct Moments {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
}

/// Sum of `(a_k - ma)(b_l - mb)` over rows, for interleaved rows of width `d`.
fn centered_dot(a: &[f64], k: usize, ma: f64, b: &[f64], l: usize, mb: f64, d: usize) -> f64 {
    if d == 1 {
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum()
    } else {
        a.chunks_exact(d)
            .zip(b.chunks_exact(d))
            .map(|(x, y)| (x[k] - ma) * (y[l] - mb))
            .sum()
    }
}

fn column_sum(a: &[f64], k: usize, d: usize) -> f64 {
    if d == 1 {
        a.iter().sum()
    } else {
        a.chunks_exact(d).map(|x| x[k]).sum()
    }
}

fn joint_moments(cloud: &ParticleCloud) -> Moments {
    let m = cloud.slots.len();
    let d = cloud.dim();
    let w = m * d;
    let n = cloud.len();
    let nchunks = n.div_ceil(CHUNK);
    let piece = |a: usize, c: usize| {
        let end = ((c + 1) * CHUNK).min(n);
        &cloud.slots[a / d].as_slice()[c * CHUNK * d..end * d]
    };
    let sums: Vec<Vec<f64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| (0..w).map(|a| column_sum(piece(a, c), a % d, d)).collect())
        .collect();
    let mut mean = vec![0.0; w];
    for part in &sums {
        for (a, v) in mean.iter_mut().zip(part) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let parts: Vec<Vec<f64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; w * w];
            for a in 0..w {
                for b in a..w {
                    acc[a * w + b] = centered_dot(piece(a, c), a % d, mean[a], piece(b, c), b % d, mean[b], d);
                }
            }
            acc
        })
        .collect();
    let mut cov = DMatrix::zeros(w, w);
    for part in &parts {
        for a in 0..w {
            for b in a..w {
                cov[(a, b)] += part[a * w + b];
            }
        }
    }
    for a in 0..w {
        for b in a..w {
            cov[(a, b)] /= n as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    Moments { mean, cov }
}

/// Drift that is affine in the stacked particle apart from the potential
/// term: the exact-linear estimator with quadratic cost.
#[derive(Clone, Debug)]
struct AffineDrift {
    offset: Vec<f64>,
    /// Row-major `w x w`; includes quadratic potential terms.
    matrix: Vec<f64>,
    /// Slots whose potential gradient is evaluated per particle.
    nonlinear: Vec<usize>,
}

enum DriftPlan {
    Fields(Vec<Points>),
    Affine(AffineDrift),
}

fn affine_drift(moments: &Moments, problem: &Problem, cfg: &SimConfig) -> Result<AffineDrift> {
    let m = problem.marginals.len();
    let d = problem.dim();
    let w = m * d;
    let mut nonlinear = Vec::new();
    let mut offset = vec![0.0; w];
    let mut matrix = vec![0.0; w * w];
    for s in 0..m {
        let sxx = moments.cov.view((s * d, s * d), (d, d)).into_owned();
        let mut svx = DMatrix::zeros(d, d);
        let mut vbar = vec![0.0; d];
        for j in (0..m).filter(|&j| j != s) {
            svx += moments.cov.view((j * d, s * d), (d, d));
            for k in 0..d {
                vbar[k] += moments.mean[j * d + k];
            }
        }
        let coef = regression_coefficients(sxx, &svx)?;
        for k in 0..d {
            let row = s * d + k;
            let mut a = vbar[k];
            for l in 0..d {
                a -= coef[(k, l)] * moments.mean[s * d + l];
                matrix[row * w + s * d + l] = -coef[(k, l)];
            }
            offset[row] = -a;
            for j in (0..m).filter(|&j| j != s) {
                matrix[row * w + j * d + k] += 1.0;
            }
        }
        if cfg.variant != Variant::Noiseless {
            match problem.marginals[s].kind() {
                PotentialKind::Quadratic { precision, .. } => {
                    for k in 0..d {
                        for l in 0..d {
                            matrix[(s * d + k) * w + s * d + l] -= cfg.epsilon * precision[(k, l)];
                        }
                    }
                }
                _ => nonlinear.push(s),
            }
        }
    }
    if offset.iter().chain(&matrix).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDrift { step: 0, particle: 0 });
    }
    Ok(AffineDrift {
        offset,
        matrix,
        nonlinear,
    })
}

fn check_problem(cloud: &ParticleCloud, problem: &Problem) -> Result<()> {
    let m = cloud.slots.len();
    if problem.marginals.len() != m {
        return Err(Error::DimensionMismatch {
            expected: problem.marginals.len(),
            got: m,
        });
    }
    if problem.dim() != cloud.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: cloud.dim(),
        });
    }
    Ok(())
}

fn uses_affine(problem: &Problem, cfg: &SimConfig) -> bool {
    problem.cost == CostSpec::Quadratic
        && cfg.estimator == CondExpEstimator::ExactLinear
        && cfg.variant != Variant::LangevinUnconstrained
}

fn plan(cloud: &ParticleCloud, moments: Option<&Moments>, problem: &Problem, cfg: &SimConfig) -> Result<DriftPlan> {
    check_problem(cloud, problem)?;
    if uses_affine(problem, cfg) {
        let owned;
        let mo = match moments {
            Some(mo) => mo,
            None => {
                owned = joint_moments(cloud);
                &owned
            }
        };
        Ok(DriftPlan::Affine(affine_drift(mo, problem, cfg)?))
    } else {
        Ok(DriftPlan::Fields(generic_drift(cloud, problem, cfg)?))
    }
}

impl DriftPlan {
    /// Drift of particles `start..start + len` (`len <= CHUNK`), column-wise:
    /// coordinate `r` of the stacked drift of particle `start + i` lands in
    /// `cols[r * CHUNK + i]`.
    fn eval_chunk(&self, cloud: &ParticleCloud, problem: &Problem, cfg: &SimConfig, start: usize, len: usize, cols: &mut [f64], g: &mut [f64]) {
        let d = cloud.dim();
        let w = cloud.slots.len() * d;
        match self {
            DriftPlan::Fields(f) => {
                for (s, p) in f.iter().enumerate() {
                    for i in 0..len {
                        for (k, v) in p.row(start + i).iter().enumerate() {
                            cols[(s * d + k) * CHUNK + i] = *v;
                        }
                    }
                }
            }
            DriftPlan::Affine(a) => {
                for r in 0..w {
                    let col = &mut cols[r * CHUNK..r * CHUNK + len];
                    col.iter_mut().for_each(|c| *c = a.offset[r]);
                    for (q, &coef) in a.matrix[r * w..(r + 1) * w].iter().enumerate() {
                        if coef == 0.0 {
                            continue;
                        }
                        let xs = &cloud.slots[q / d].as_slice()[start * d..(start + len) * d];
                        if d == 1 {
                            for (c, x) in col.iter_mut().zip(xs) {
                                *c += coef * x;
                            }
                        } else {
                            for (c, x) in col.iter_mut().zip(xs.chunks_exact(d)) {
                                *c += coef * x[q % d];
                            }
                        }
                    }
                }
                for &s in &a.nonlinear {
                    let pot = &problem.marginals[s];
                    for i in 0..len {
                        pot.gradient_into(cloud.slots[s].row(start + i), g);
                        for k in 0..d {
                            cols[(s * d + k) * CHUNK + i] -= cfg.epsilon * g[k];
                        }
                    }
                }
            }
        }
    }
}

/// Drift of each slot evaluated on the current cloud (explicit scheme).
pub fn drift_fields(cloud: &ParticleCloud, problem: &Problem, cfg: &SimConfig) -> Result<Vec<Points>> {
    match plan(cloud, None, problem, cfg)? {
        DriftPlan::Fields(f) => Ok(f),
        p @ DriftPlan::Affine(_) => {
            let (m, d, n) = (cloud.slots.len(), cloud.dim(), cloud.len());
            let mut out: Vec<Points> = (0..m).map(|_| Points::zeros(n, d)).collect();
            let mut cols = vec![0.0; m * d * CHUNK];
            let mut g = vec![0.0; d];
            for start in (0..n).step_by(CHUNK) {
                let len = CHUNK.min(n - start);
                p.eval_chunk(cloud, problem, cfg, start, len, &mut cols, &mut g);
                for (s, o) in out.iter_mut().enumerate() {
                    for i in 0..len {
                        for k in 0..d {
                            o.row_mut(start + i)[k] = cols[(s * d + k) * CHUNK + i];
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

fn generic_drift(cloud: &ParticleCloud, problem: &Problem, cfg: &SimConfig) -> Result<Vec<Points>> {
    let m = cloud.slots.len();
    let n = cloud.len();
    let d = cloud.dim();
    let eps = cfg.epsilon;
    let potential_term = cfg.variant != Variant::Noiseless;
    let quadratic = problem.cost == CostSpec::Quadratic;
    let mut out = Vec::with_capacity(m);
    for s in 0..m {
        let pot = &problem.marginals[s];
        let mut drift = Points::zeros(n, d);
        if cfg.variant == Variant::LangevinUnconstrained {
            drift
                .as_mut_slice()
                .par_chunks_mut(d)
                .enumerate()
                .for_each_init(
                    || (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
                    |(g, t, u), (i, b)| {
                        cost_grad_slot(&problem.cost, &cloud.slots, s, i, g, t);
                        pot.gradient_into(cloud.slots[s].row(i), u);
                        for k in 0..d {
                            b[k] = -g[k] - eps * u[k];
                        }
                    },
                );
        } else {
            // Regression targets: the other slots' sum for quadratic cost, the
            // cost gradient otherwise.
            let mut values = Points::zeros(n, d);
            values
                .as_mut_slice()
                .par_chunks_mut(d)
                .enumerate()
                .for_each_init(
                    || vec![0.0; d],
                    |t, (i, v)| {
                        if quadratic {
                            for (j, other) in cloud.slots.iter().enumerate() {
                                if j != s {
                                    for (vk, ok) in v.iter_mut().zip(other.row(i)) {
                                        *vk += ok;
                                    }
                                }
                            }
                        } else {
                            cost_grad_slot(&problem.cost, &cloud.slots, s, i, v, t);
                        }
                    },
                );
            let xs = &cloud.slots[s];
            let sign = if quadratic { 1.0 } else { -1.0 };
            let pred = match &cfg.estimator {
                CondExpEstimator::ExactLinear => {
                    let (a, coef) = linear_fit(xs, &values)?;
                    let mut p = Points::zeros(n, d);
                    for (i, row) in p.as_mut_slice().chunks_mut(d).enumerate() {
                        let x = xs.row(i);
                        for k in 0..d {
                            row[k] = a[k] + (0..d).map(|l| coef[(k, l)] * x[l]).sum::<f64>();
                        }
                    }
                    p
                }
                est => fit_predict(xs, &values, xs, est)?.values,
            };
            drift
                .as_mut_slice()
                .par_chunks_mut(d)
                .enumerate()
                .for_each_init(
                    || vec![0.0; d],
                    |u, (i, b)| {
                        if potential_term {
                            pot.gradient_into(xs.row(i), u);
                        }
                        let v = values.row(i);
                        let c = pred.row(i);
                        for k in 0..d {
                            let cond = sign * (v[k] - c[k]);
                            b[k] = if potential_term { cond - eps * u[k] } else { cond };
                        }
                    },
                );
        }
        out.push(drift);
    }
    Ok(out)
}

/// One explicit step. Returns the new cloud and, per slot, the summed squared
/// drift norm at the old positions.
fn advance(
    cloud: &ParticleCloud,
    plan: &DriftPlan,
    dt: f64,
    problem: &Problem,
    cfg: &SimConfig,
    noise: &mut NoiseSource,
) -> Result<(ParticleCloud, Vec<f64>)> {
    let n = cloud.len();
    if noise.rngs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: noise.rngs.len(),
            got: n,
        });
    }
    let m = cloud.slots.len();
    let d = cloud.dim();
    let w = m * d;
    let diffusive = cfg.variant != Variant::Noiseless;
    let scale = if diffusive { (2.0 * cfg.epsilon * dt).sqrt() } else { 0.0 };
    let mut outs: Vec<Vec<f64>> = (0..m).map(|_| vec![0.0; n * d]).collect();
    let nchunks = n.div_ceil(CHUNK);
    let mut pieces: Vec<Vec<&mut [f64]>> = (0..nchunks).map(|_| Vec::with_capacity(m)).collect();
    for o in outs.iter_mut() {
        for (c, piece) in o.chunks_mut(CHUNK * d).enumerate() {
            pieces[c].push(piece);
        }
    }
    // Per chunk: squared drift sums per slot, or the first non-finite particle.
    let results: Vec<std::result::Result<Vec<f64>, usize>> = pieces
        .into_par_iter()
        .zip(noise.rngs.par_chunks_mut(CHUNK))
        .enumerate()
        .map(|(c, (mut piece, rngs))| {
            let start = c * CHUNK;
            let len = rngs.len();
            let mut cols = vec![0.0; w * CHUNK];
            let mut g = vec![0.0; d];
            plan.eval_chunk(cloud, problem, cfg, start, len, &mut cols, &mut g);
            let mut sq = vec![0.0; m];
            let mut bad = None;
            for r in 0..w {
                let col = &cols[r * CHUNK..r * CHUNK + len];
                if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                    bad = Some(bad.map_or(i, |b: usize| b.min(i)));
                }
                sq[r / d] += col.iter().map(|v| v * v).sum::<f64>();
            }
            if let Some(i) = bad {
                return Err(start + i);
            }
            for (s, out) in piece.iter_mut().enumerate() {
                let x = &cloud.slots[s].as_slice()[start * d..(start + len) * d];
                for k in 0..d {
                    let col = &cols[(s * d + k) * CHUNK..(s * d + k) * CHUNK + len];
                    for i in 0..len {
                        out[i * d + k] = x[i * d + k] + dt * col[i];
                    }
                }
            }
            if diffusive {
                for (i, rng) in rngs.iter_mut().enumerate() {
                    for out in piece.iter_mut() {
                        for o in &mut out[i * d..(i + 1) * d] {
                            let z: f64 = rng.sample(StandardNormal);
                            *o += scale * z;
                        }
                    }
                }
            }
            Ok(sq)
        })
        .collect();
    let mut sq = vec![0.0; m];
    for r in results {
        match r {
            Ok(part) => sq.iter_mut().zip(part).for_each(|(a, b)| *a += b),
            Err(particle) => {
                return Err(Error::NonFiniteDrift {
                    step: noise.steps,
                    particle,
                })
            }
        }
    }
    noise.steps += 1;
    let slots = outs
        .into_iter()
        .map(|v| Points::new(d, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((ParticleCloud { slots, t: cloud.t + dt }, sq))
}

/// Summed squared drift norms per slot without moving the particles.
fn drift_square_sums(cloud: &ParticleCloud, plan: &DriftPlan, problem: &Problem, cfg: &SimConfig) -> Vec<f64> {
    let (m, d, n) = (cloud.slots.len(), cloud.dim(), cloud.len());
    let mut cols = vec![0.0; m * d * CHUNK];
    let mut g = vec![0.0; d];
    let mut sq = vec![0.0; m];
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        plan.eval_chunk(cloud, problem, cfg, start, len, &mut cols, &mut g);
        for r in 0..m * d {
            sq[r / d] += cols[r * CHUNK..r * CHUNK + len].iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq
}

/// One step of the two-marginal dynamics.
pub fn step(
    cloud: &ParticleCloud,
    problem: &Problem,
    cfg: &SimConfig,
    noise: &mut NoiseSource,
) -> Result<ParticleCloud> {
    if cloud.slots.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: cloud.slots.len(),
        });
    }
    step_multimarginal(cloud, problem, cfg, noise)
}

/// One step with `m >= 2` slots; with two slots this is exactly [`step`].
pub fn step_multimarginal(
    cloud: &ParticleCloud,
    problem: &Problem,
    cfg: &SimConfig,
    noise: &mut NoiseSource,
) -> Result<ParticleCloud> {
    if cloud.slots.len() < 2 {
        return Err(invalid("slots", "need at least two"));
    }
    if cfg.dt == 0.0 {
        return Ok(cloud.clone());
    }
    let p = plan(cloud, None, problem, cfg)?;
    Ok(advance(cloud, &p, cfg.dt, problem, cfg, noise)?.0)
}

/// Moments recorded after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub t: f64,
    /// Per slot, per coordinate.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Uncentred `E[X_a X_b^T]` for slot pairs `a < b` in lexicographic order.
    pub cross: Vec<DMatrix<f64>>,
    /// Root-mean-square drift norm per slot.
    pub drift_rms: Vec<f64>,
}

impl StepSummary {
    pub fn compute(cloud: &ParticleCloud, drifts: &[Points]) -> Self {
        let n = cloud.len().max(1) as f64;
        let sq = drifts
            .iter()
            .map(|p| p.as_slice().iter().map(|v| v * v).sum::<f64>())
            .collect::<Vec<_>>();
        Self::from_moments(cloud, &joint_moments(cloud), &sq, n)
    }

    fn from_moments(cloud: &ParticleCloud, mo: &Moments, drift_sq: &[f64], n: f64) -> Self {
        let m = cloud.slots.len();
        let d = cloud.dim();
        let means: Vec<Vec<f64>> = (0..m).map(|s| mo.mean[s * d..(s + 1) * d].to_vec()).collect();
        let variances = (0..m)
            .map(|s| (0..d).map(|k| mo.cov[(s * d + k, s * d + k)]).collect())
            .collect();
        let mut cross = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                cross.push(DMatrix::from_fn(d, d, |i, j| {
                    mo.cov[(a * d + i, b * d + j)] + means[a][i] * means[b][j]
                }));
            }
        }
        Self {
            t: cloud.t,
            means,
            variances,
            cross,
            drift_rms: drift_sq.iter().map(|s| (s / n).sqrt()).collect(),
        }
    }
    /// Index into `cross` of the pair `(a, b)`, `a < b`.
    pub fn pair_index(m: usize, a: usize, b: usize) -> usize {
        debug_assert!(a < b && b < m);
        a * m - a * (a + 1) / 2 + (b - a - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub summaries: Vec<StepSummary>,
    pub checkpoints: Vec<ParticleCloud>,
    /// Step index of each checkpoint.
    pub checkpoint_steps: Vec<usize>,
}

impl Trajectory {
    pub fn checkpoint_summaries(&self) -> impl Iterator<Item = &StepSummary> {
        self.checkpoint_steps.iter().map(|&k| &self.summaries[k])
    }

    pub fn last(&self) -> &StepSummary {
        self.summaries.last().expect("at least one summary")
    }

    /// One row per checkpoint: time, per-slot means and variances, cross
    /// moments and drift norms.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let Some(first) = self.summaries.first() else {
            return Ok(());
        };
        let m = first.means.len();
        let d = first.means[0].len();
        let mut header = vec!["t".to_string()];
        for s in 0..m {
            for k in 0..d {
                header.push(format!("mean_{s}_{k}"));
            }
            for k in 0..d {
                header.push(format!("var_{s}_{k}"));
            }
        }
        for a in 0..m {
            for b in a + 1..m {
                for i in 0..d {
                    for j in 0..d {
                        header.push(format!("cross_{a}{b}_{i}{j}"));
                    }
                }
            }
        }
        for s in 0..m {
            header.push(format!("drift_rms_{s}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for sm in self.checkpoint_summaries() {
            let mut row = vec![sm.t];
            for s in 0..m {
                row.extend(&sm.means[s]);
                row.extend(&sm.variances[s]);
            }
            for c in &sm.cross {
                for i in 0..d {
                    for j in 0..d {
                        row.push(c[(i, j)]);
                    }
                }
            }
            row.extend(&sm.drift_rms);
            let row: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn root_streams(seed: u64) -> (RngStream, RngStream) {
    let root = RngStream::new(seed);
    (root.substream(1), root.substream(2))
}

/// Draws `P_0` according to `cfg.init`.
pub fn initial_cloud(problem: &Problem, cfg: &SimConfig) -> Result<ParticleCloud> {
    let m = cfg.variant.slots();
    if problem.marginals.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: problem.marginals.len(),
        });
    }
    let (sampling, _) = root_streams(cfg.seed);
    let n = cfg.n_particles;
    let slots = match &cfg.init {
        InitialCoupling::Product | InitialCoupling::Comonotone => {
            let mut slots = problem
                .marginals
                .iter()
                .enumerate()
                .map(|(s, p)| sample_marginal(p, n, sampling.substream(s as u64)))
                .collect::<Result<Vec<_>>>()?;
            if cfg.init == InitialCoupling::Comonotone {
                if problem.dim() != 1 {
                    return Err(Error::Unsupported("comonotone initialisation needs d = 1".into()));
                }
                for s in &mut slots {
                    s.as_mut_slice().sort_by(f64::total_cmp);
                }
            }
            slots
        }
        InitialCoupling::Gaussian { cross } => {
            let covs: Vec<&DMatrix<f64>> = problem
                .marginals
                .iter()
                .filter_map(|p| p.covariance())
                .collect();
            if m != 2 || covs.len() != 2 {
                return Err(Error::Unsupported(
                    "Gaussian initialisation needs two quadratic marginals".into(),
                ));
            }
            let (xs, ys) = sample_joint_gaussian(covs[0], covs[1], cross, n, sampling)?;
            vec![xs, ys]
        }
    };
    ParticleCloud::multi(slots, 0.0)
}

/// Runs the particle system from a freshly drawn `P_0`.
pub fn simulate(problem: &Problem, cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let cloud = initial_cloud(problem, cfg)?;
    simulate_from(cloud, problem, cfg)
}

/// Runs the particle system from a given initial cloud.
pub fn simulate_from(mut cloud: ParticleCloud, problem: &Problem, cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if cloud.slots.len() != cfg.variant.slots() {
        return Err(Error::DimensionMismatch {
            expected: cfg.variant.slots(),
            got: cloud.slots.len(),
        });
    }
    let (_, noise_root) = root_streams(cfg.seed);
    let mut noise = NoiseSource::new(noise_root, cloud.len());
    let n_steps = cfg.n_steps();
    let n = cloud.len() as f64;
    let mut wanted = cfg.checkpoint_times.iter().map(|&t| cfg.step_of(t)).peekable();
    let mut traj = Trajectory {
        summaries: Vec::with_capacity(n_steps + 1),
        checkpoints: Vec::new(),
        checkpoint_steps: Vec::new(),
    };
    cloud.t = 0.0;
    for k in 0..=n_steps {
        let moments = joint_moments(&cloud);
        let p = plan(&cloud, Some(&moments), problem, cfg)?;
        if wanted.peek() == Some(&k) {
            wanted.next();
            traj.checkpoints.push(cloud.clone());
            traj.checkpoint_steps.push(k);
        }
        if k == n_steps {
            let sq = drift_square_sums(&cloud, &p, problem, cfg);
            traj.summaries.push(StepSummary::from_moments(&cloud, &moments, &sq, n));
            break;
        }
        let h = cfg.time_at(k + 1) - cfg.time_at(k);
        let (mut next, sq) = advance(&cloud, &p, h, problem, cfg, &mut noise)?;
        traj.summaries.push(StepSummary::from_moments(&cloud, &moments, &sq, n));
        next.t = cfg.time_at(k + 1);
        cloud = next;
        if k % 1000 == 999 {
            log::debug!("step {} of {n_steps}, t = {:.3}", k + 1, cloud.t);
        }
    }
    Ok(traj)
}
/// Covariance-level surrogate for Gaussian problems: the Riccati flow started
/// from the cross-covariance of `cfg.init`.
pub fn simulate_moments(problem: &Problem, cfg: &SimConfig) -> Result<RiccatiTrajectory> {
    cfg.validate()?;
    if !problem.is_gaussian() || problem.marginals.len() != 2 || cfg.variant != Variant::Standard {
        return Err(Error::Unsupported(
            "moment surrogate needs a two-marginal Gaussian problem and the standard variant".into(),
        ));
    }
    let cov = |i: usize| match problem.marginals[i].kind() {
        PotentialKind::Quadratic { covariance, .. } => covariance.clone(),
        _ => unreachable!("checked quadratic"),
    };
    let (smu, snu) = (cov(0), cov(1));
    let d = smu.nrows();
    let sigma0 = match &cfg.init {
        InitialCoupling::Product => DMatrix::zeros(d, d),
        InitialCoupling::Gaussian { cross } => cross.clone(),
        InitialCoupling::Comonotone => {
            if d != 1 {
                return Err(Error::Unsupported("comonotone initialisation needs d = 1".into()));
            }
            DMatrix::from_element(1, 1, (smu[(0, 0)] * snu[(0, 0)]).sqrt())
        }
    };
    let state = RiccatiState::new(sigma0, smu, snu, cfg.epsilon)?;
    integrate_riccati(&state, cfg.horizon, cfg.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PotentialSpec;

    fn gaussian_1d() -> Problem {
        Problem::pair(
            PotentialSpec::standard_normal(1),
            PotentialSpec::standard_normal(1),
            CostSpec::Quadratic,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::new(0.5, 1.0, 10);
        assert!(c.validate().is_ok());
        c.n_particles = 1;
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(0.5, 1.0, 10);
        c.checkpoint_times = vec![0.5, 0.2];
        assert!(c.validate().is_err());
        c.checkpoint_times = vec![0.5, 1.5];
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(0.5, 1.0, 10);
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::new(0.0, 1.0, 10);
        assert!(c.validate().is_err());
        c.variant = Variant::Noiseless;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn default_dt_rule() {
        assert_eq!(default_dt(0.5), 1e-3);
        assert_eq!(default_dt(0.005), 0.0005);
    }

    #[test]
    fn zero_dt_leaves_cloud_unchanged() {
        let p = gaussian_1d();
        let mut cfg = SimConfig::new(0.5, 1.0, 100);
        let cloud = initial_cloud(&p, &cfg).unwrap();
        cfg.dt = 0.0;
        let mut noise = NoiseSource::new(RngStream::new(1), 100);
        let next = step(&cloud, &p, &cfg, &mut noise).unwrap();
        assert_eq!(next, cloud);
    }

    #[test]
    fn single_step_horizon_has_both_checkpoints() {
        let p = gaussian_1d();
        let mut cfg = SimConfig::new(0.5, 1e-3, 50);
        cfg.checkpoint_times = vec![0.0, 1e-3];
        let tr = simulate(&p, &cfg).unwrap();
        let ts: Vec<f64> = tr.checkpoints.iter().map(|c| c.t).collect();
        assert_eq!(ts, vec![0.0, 1e-3]);
        assert_eq!(tr.summaries.len(), 2);
    }

    #[test]
    fn pair_index_enumerates_pairs() {
        let m = 4;
        let mut k = 0;
        for a in 0..m {
            for b in a + 1..m {
                assert_eq!(StepSummary::pair_index(m, a, b), k);
                k += 1;
            }
        }
    }

    #[test]
    fn non_finite_drift_reports_particle() {
        let p = gaussian_1d();
        let cfg = SimConfig::new(0.5, 1.0, 4);
        let xs = Points::from_scalars(vec![0.0, 1.0, 2.0, 3.0]);
        let ys = Points::from_scalars(vec![0.0, 1.0, 2.0, 3.0]);
        let cloud = ParticleCloud::new(xs, ys, 0.0).unwrap();
        let mut drifts = drift_fields(&cloud, &p, &cfg).unwrap();
        drifts[1].row_mut(2)[0] = f64::NAN;
        let mut noise = NoiseSource::new(RngStream::new(0), 4);
        match advance(&cloud, &DriftPlan::Fields(drifts), 1e-3, &p, &cfg, &mut noise) {
            Err(Error::NonFiniteDrift { step, particle }) => assert_eq!((step, particle), (0, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn snapshot_header_layout() {
        let cloud = ParticleCloud::new(
            Points::from_scalars(vec![1.0, 2.0]),
            Points::from_scalars(vec![3.0, 4.0]),
            0.25,
        )
        .unwrap();
        let mut buf = Vec::new();
        cloud.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 8);
        assert_eq!(&buf[..2], b"SF");
        assert_eq!(u16::from_le_bytes([buf[2], buf[3]]), 2);
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[8..16].try_into().unwrap()), 0.25);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 3.0);
    }

    #[test]
    fn affine_path_matches_generic_regression() {
        let p = Problem::pair(
            PotentialSpec::symmetric_mixture(1.5),
            PotentialSpec::standard_normal(1),
            CostSpec::Quadratic,
        )
        .unwrap();
        let mut cfg = SimConfig::new(0.7, 1.0, 5000);
        cfg.seed = 4;
        let cloud = initial_cloud(&p, &cfg).unwrap();
        let fused = drift_fields(&cloud, &p, &cfg).unwrap();
        let generic = generic_drift(&cloud, &p, &cfg).unwrap();
        for (a, b) in fused.iter().zip(&generic) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn summary_moments_match_direct_formulas() {
        let p = gaussian_1d();
        let cfg = SimConfig::new(0.5, 1.0, 9000);
        let cloud = initial_cloud(&p, &cfg).unwrap();
        let drifts = drift_fields(&cloud, &p, &cfg).unwrap();
        let sm = StepSummary::compute(&cloud, &drifts);
        let x = cloud.xs().as_slice();
        let y = cloud.ys().as_slice();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let exy = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((sm.means[0][0] - mx).abs() < 1e-12);
        assert!((sm.variances[0][0] - vx).abs() < 1e-12);
        assert!((sm.cross[0][(0, 0)] - exy).abs() < 1e-12);
    }
}
