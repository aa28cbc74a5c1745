//! Nonparametric estimators of `x -> E[value | X = x]` fitted on a particle
//! cloud. These supply the conditional drift terms of the projected dynamics.

use crate::error::{invalid, Error, Result};
use crate::kdtree::KdTree;
use crate::points::Points;
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::collections::HashMap;

/// Floor applied when the sample spread vanishes.
pub const MIN_BANDWIDTH: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// `scale * default_bandwidth(xs)`.
    Silverman { scale: f64 },
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CondExpEstimator {
    /// Epanechnikov-kernel local average.
    NadarayaWatson(Bandwidth),
    Knn { k: usize },
    /// Equal-mass bins in d = 1, a regular grid with `bins` cells per axis otherwise.
    Binning { bins: usize },
    /// Least-squares affine predictor.
    ExactLinear,
}

impl Default for CondExpEstimator {
    fn default() -> Self {
        CondExpEstimator::ExactLinear
    }
}

impl CondExpEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            CondExpEstimator::NadarayaWatson(_) => "nadaraya-watson",
            CondExpEstimator::Knn { .. } => "knn",
            CondExpEstimator::Binning { .. } => "binning",
            CondExpEstimator::ExactLinear => "exact-linear",
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match *self {
            CondExpEstimator::NadarayaWatson(Bandwidth::Fixed(h)) if !(h > 0.0 && h.is_finite()) => {
                Err(invalid("bandwidth", format!("must be positive, got {h}")))
            }
            CondExpEstimator::NadarayaWatson(Bandwidth::Silverman { scale })
                if !(scale > 0.0 && scale.is_finite()) =>
            {
                Err(invalid("bandwidth", format!("scale must be positive, got {scale}")))
            }
            CondExpEstimator::Knn { k } if k == 0 || k > n => {
                Err(invalid("k", format!("must lie in 1..={n}, got {k}")))
            }
            CondExpEstimator::Binning { bins } if bins == 0 => Err(invalid("bins", "must be positive")),
            _ => Ok(()),
        }
    }
}

/// Estimator output. `degenerate` is set when all inputs coincide and the
/// plain mean was returned.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Points,
    pub degenerate: bool,
}

/// Silverman-type rule `sd_k * N^{-1/(d+4)}`, combined across coordinates by
/// geometric mean.
pub fn default_bandwidth(xs: &Points) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Err(invalid("xs", format!("need at least 2 points, got {n}")));
    }
    let d = xs.dim();
    let mean = xs.mean();
    let mut var = vec![0.0; d];
    for r in xs.rows() {
        for k in 0..d {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
    let log_mean = var
        .iter()
        .map(|v| ((v / (n - 1) as f64).sqrt() * factor).max(MIN_BANDWIDTH).ln())
        .sum::<f64>()
        / d as f64;
    Ok(log_mean.exp())
}

/// Fits the estimator on `(xs, values)` and evaluates it at `queries`.
pub fn fit_predict(
    xs: &Points,
    values: &Points,
    queries: &Points,
    est: &CondExpEstimator,
) -> Result<Prediction> {
    let n = xs.len();
    if n < 2 {
        return Err(invalid("xs", format!("need at least 2 points, got {n}")));
    }
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: values.len(),
        });
    }
    if queries.dim() != xs.dim() {
        return Err(Error::DimensionMismatch {
            expected: xs.dim(),
            got: queries.dim(),
        });
    }
    est.validate(n)?;
    let first = xs.row(0);
    if xs.rows().all(|r| r == first) {
        log::warn!("conditional expectation fitted on identical points; returning the mean");
        let mean = values.mean();
        let mut out = Points::zeros(queries.len(), values.dim());
        out.as_mut_slice()
            .chunks_exact_mut(values.dim())
            .for_each(|r| r.copy_from_slice(&mean));
        return Ok(Prediction {
            values: out,
            degenerate: true,
        });
    }
    let values = match *est {
        CondExpEstimator::NadarayaWatson(bw) => {
            let h = match bw {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Silverman { scale } => scale * default_bandwidth(xs)?,
            };
            if xs.dim() == 1 {
                nadaraya_watson_1d(xs, values, queries, h)
            } else {
                nadaraya_watson_brute(xs, values, queries, h)
            }
        }
        CondExpEstimator::Knn { k } => knn(xs, values, queries, k),
        CondExpEstimator::Binning { bins } => {
            if xs.dim() == 1 {
                binning_quantile(xs, values, queries, bins)
            } else {
                binning_grid(xs, values, queries, bins)
            }
        }
        CondExpEstimator::ExactLinear => exact_linear(xs, values, queries)?,
    };
    Ok(Prediction {
        values,
        degenerate: false,
    })
}

fn sorted_order(xs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_unstable_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    order
}

fn value_range(values: &Points) -> (Vec<f64>, Vec<f64>) {
    let k = values.dim();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for r in values.rows() {
        for j in 0..k {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    (lo, hi)
}

// Kernel sums over a window via prefix sums of 1, x, x^2 weighted by the
// values. Coordinates are shifted by the sample centre to limit cancellation.
fn nadaraya_watson_1d(xs: &Points, values: &Points, queries: &Points, h: f64) -> Points {
    let n = xs.len();
    let kdim = values.dim();
    let raw = xs.as_slice();
    let order = sorted_order(raw);
    let centre = raw.iter().sum::<f64>() / n as f64;
    let sx: Vec<f64> = order.iter().map(|&i| raw[i] - centre).collect();
    // Per sorted position: [1, x, x^2] and for each value coordinate [v, x v, x^2 v].
    let width = 3 * (kdim + 1);
    let mut prefix = vec![0.0; (n + 1) * width];
    for (p, &i) in order.iter().enumerate() {
        let x = sx[p];
        let (head, tail) = prefix.split_at_mut((p + 1) * width);
        let prev = &head[p * width..];
        let cur = &mut tail[..width];
        cur[0] = prev[0] + 1.0;
        cur[1] = prev[1] + x;
        cur[2] = prev[2] + x * x;
        let v = values.row(i);
        for j in 0..kdim {
            let o = 3 * (j + 1);
            cur[o] = prev[o] + v[j];
            cur[o + 1] = prev[o + 1] + x * v[j];
            cur[o + 2] = prev[o + 2] + x * x * v[j];
        }
    }
    let (lo, hi) = value_range(values);
    let inv_h2 = 1.0 / (h * h);
    let mut out = Points::zeros(queries.len(), kdim);
    out.as_mut_slice()
        .par_chunks_mut(kdim)
        .zip(queries.as_slice().par_iter())
        .for_each(|(o, &q)| {
            let q = q - centre;
            let a = sx.partition_point(|&x| x < q - h);
            let b = sx.partition_point(|&x| x <= q + h);
            let kernel_sum = |off: usize| {
                let s0 = prefix[b * width + off] - prefix[a * width + off];
                let s1 = prefix[b * width + off + 1] - prefix[a * width + off + 1];
                let s2 = prefix[b * width + off + 2] - prefix[a * width + off + 2];
                s0 - (q * q * s0 - 2.0 * q * s1 + s2) * inv_h2
            };
            let denom = if b > a { kernel_sum(0) } else { 0.0 };
            if denom > 1e-12 * (b - a) as f64 {
                for j in 0..kdim {
                    o[j] = (kernel_sum(3 * (j + 1)) / denom).clamp(lo[j], hi[j]);
                }
            } else {
                // No sample inside the support: fall back to the nearest sample.
                let p = sx.partition_point(|&x| x < q);
                let nearest = match (p.checked_sub(1), (p < n).then_some(p)) {
                    (Some(l), Some(r)) => {
                        if (q - sx[l]).abs() <= (sx[r] - q).abs() {
                            l
                        } else {
                            r
                        }
                    }
                    (Some(l), None) => l,
                    (None, Some(r)) => r,
                    (None, None) => unreachable!("n >= 2"),
                };
                o.copy_from_slice(values.row(order[nearest]));
            }
        });
    out
}

fn nadaraya_watson_brute(xs: &Points, values: &Points, queries: &Points, h: f64) -> Points {
    let kdim = values.dim();
    let inv_h2 = 1.0 / (h * h);
    let mut out = Points::zeros(queries.len(), kdim);
    out.as_mut_slice()
        .par_chunks_mut(kdim)
        .zip(queries.as_slice().par_chunks(queries.dim()))
        .for_each(|(o, q)| {
            let mut denom = 0.0;
            let mut num = vec![0.0; kdim];
            let mut best = (f64::INFINITY, 0usize);
            for (i, x) in xs.rows().enumerate() {
                let d2: f64 = x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, i);
                }
                let w = 1.0 - d2 * inv_h2;
                if w > 0.0 {
                    denom += w;
                    for (nj, vj) in num.iter_mut().zip(values.row(i)) {
                        *nj += w * vj;
                    }
                }
            }
            if denom > 0.0 {
                for j in 0..kdim {
                    o[j] = num[j] / denom;
                }
            } else {
                o.copy_from_slice(values.row(best.1));
            }
        });
    out
}

fn knn(xs: &Points, values: &Points, queries: &Points, k: usize) -> Points {
    let kdim = values.dim();
    let tree = KdTree::build(xs);
    let mut out = Points::zeros(queries.len(), kdim);
    out.as_mut_slice()
        .par_chunks_mut(kdim)
        .zip(queries.as_slice().par_chunks(queries.dim()))
        .for_each(|(o, q)| {
            o.iter_mut().for_each(|v| *v = 0.0);
            for i in tree.nearest(q, k) {
                for (oj, vj) in o.iter_mut().zip(values.row(i)) {
                    *oj += vj;
                }
            }
            o.iter_mut().for_each(|v| *v /= k as f64);
        });
    out
}

fn binning_quantile(xs: &Points, values: &Points, queries: &Points, bins: usize) -> Points {
    let n = xs.len();
    let kdim = values.dim();
    let raw = xs.as_slice();
    let order = sorted_order(raw);
    // Contiguous runs of the sorted sample; a cut never separates equal values.
    let mut uppers = Vec::with_capacity(bins);
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(bins);
    let mut counts = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        if start >= n {
            break;
        }
        let mut end = if b + 1 == bins {
            n
        } else {
            ((b + 1) * n / bins).max(start + 1)
        };
        while end < n && raw[order[end]] == raw[order[end - 1]] {
            end += 1;
        }
        let mut s = vec![0.0; kdim];
        for &i in &order[start..end] {
            for (sj, vj) in s.iter_mut().zip(values.row(i)) {
                *sj += vj;
            }
        }
        uppers.push(raw[order[end - 1]]);
        sums.push(s);
        counts.push((end - start) as f64);
        start = end;
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c).collect())
        .collect();
    let last = means.len() - 1;
    let mut out = Points::zeros(queries.len(), kdim);
    for (o, &q) in out.as_mut_slice().chunks_exact_mut(kdim).zip(queries.as_slice()) {
        let b = uppers.partition_point(|&u| u < q).min(last);
        o.copy_from_slice(&means[b]);
    }
    out
}

fn binning_grid(xs: &Points, values: &Points, queries: &Points, bins: usize) -> Points {
    let d = xs.dim();
    let kdim = values.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in xs.rows() {
        for k in 0..d {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    let cell = |x: &[f64]| -> Vec<usize> {
        (0..d)
            .map(|k| {
                let w = hi[k] - lo[k];
                if w <= 0.0 {
                    0
                } else {
                    (((x[k] - lo[k]) / w * bins as f64).floor().max(0.0) as usize).min(bins - 1)
                }
            })
            .collect()
    };
    let mut stats: HashMap<Vec<usize>, (Vec<f64>, f64)> = HashMap::new();
    for (x, v) in xs.rows().zip(values.rows()) {
        let e = stats
            .entry(cell(x))
            .or_insert_with(|| (vec![0.0; kdim], 0.0));
        for (s, vj) in e.0.iter_mut().zip(v) {
            *s += vj;
        }
        e.1 += 1.0;
    }
    let global = values.mean();
    let mut out = Points::zeros(queries.len(), kdim);
    for (o, q) in out.as_mut_slice().chunks_exact_mut(kdim).zip(queries.rows()) {
        match stats.get(&cell(q)) {
            Some((s, c)) => {
                for (oj, sj) in o.iter_mut().zip(s) {
                    *oj = sj / c;
                }
            }
            None => o.copy_from_slice(&global),
        }
    }
    out
}

/// Least-squares affine fit `v ~ a + B x`, returning `(a, B)` with `B` of shape `k x d`.
/// `B = S_vx S_xx^{-1}`, with a pseudo-inverse when `S_xx` is singular.
pub(crate) fn regression_coefficients(sxx: DMatrix<f64>, svx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match sxx.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&svx.transpose()).transpose()),
        None => {
            let tol = 1e-12 * sxx.amax();
            let pinv = sxx
                .pseudo_inverse(tol)
                .map_err(|e| invalid("xs", e.to_string()))?;
            Ok(svx * pinv)
        }
    }
}

pub fn linear_fit(xs: &Points, values: &Points) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = xs.dim();
    let kdim = values.dim();
    let n = xs.len() as f64;
    let xbar = xs.mean();
    let vbar = values.mean();
    let mut sxx = DMatrix::<f64>::zeros(d, d);
    let mut svx = DMatrix::<f64>::zeros(kdim, d);
    for (x, v) in xs.rows().zip(values.rows()) {
        for a in 0..d {
            let xa = x[a] - xbar[a];
            for b in 0..d {
                sxx[(a, b)] += xa * (x[b] - xbar[b]);
            }
            for j in 0..kdim {
                svx[(j, a)] += (v[j] - vbar[j]) * xa;
            }
        }
    }
    sxx /= n;
    svx /= n;
    let coef = regression_coefficients(sxx, &svx)?;
    let intercept: Vec<f64> = (0..kdim)
        .map(|j| vbar[j] - (0..d).map(|a| coef[(j, a)] * xbar[a]).sum::<f64>())
        .collect();
    Ok((intercept, coef))
}

fn exact_linear(xs: &Points, values: &Points, queries: &Points) -> Result<Points> {
    let d = xs.dim();
    let kdim = values.dim();
    let xbar = xs.mean();
    let vbar = values.mean();
    let (_, coef) = linear_fit(xs, values)?;
    let mut out = Points::zeros(queries.len(), kdim);
    out.as_mut_slice()
        .par_chunks_mut(kdim)
        .zip(queries.as_slice().par_chunks(d))
        .for_each(|(o, q)| {
            for j in 0..kdim {
                let mut s = vbar[j];
                for a in 0..d {
                    s += coef[(j, a)] * (q[a] - xbar[a]);
                }
                o[j] = s;
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_marginal, PotentialSpec, RngStream};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_estimators() -> Vec<CondExpEstimator> {
        vec![
            CondExpEstimator::NadarayaWatson(Bandwidth::Silverman { scale: 1.0 }),
            CondExpEstimator::NadarayaWatson(Bandwidth::Fixed(0.05)),
            CondExpEstimator::Knn { k: 10 },
            CondExpEstimator::Binning { bins: 8 },
            CondExpEstimator::ExactLinear,
        ]
    }

    #[test]
    fn constant_values_reproduced() {
        let xs = sample_marginal(&PotentialSpec::standard_normal(2), 500, RngStream::new(2)).unwrap();
        let vals = Points::new(2, [1.5, -0.25].repeat(500)).unwrap();
        for est in all_estimators() {
            let p = fit_predict(&xs, &vals, &xs, &est).unwrap();
            for r in p.values.rows() {
                assert!((r[0] - 1.5).abs() < 1e-12 && (r[1] + 0.25).abs() < 1e-12, "{est:?}");
            }
        }
    }

    #[test]
    fn parameter_errors() {
        let xs = Points::from_scalars(vec![0.0, 1.0, 2.0]);
        let v = xs.clone();
        assert!(fit_predict(&xs, &v, &xs, &CondExpEstimator::Knn { k: 4 }).is_err());
        assert!(fit_predict(&xs, &v, &xs, &CondExpEstimator::Knn { k: 0 }).is_err());
        assert!(fit_predict(
            &xs,
            &v,
            &xs,
            &CondExpEstimator::NadarayaWatson(Bandwidth::Fixed(0.0))
        )
        .is_err());
        assert!(fit_predict(
            &xs,
            &v,
            &xs,
            &CondExpEstimator::NadarayaWatson(Bandwidth::Fixed(-1.0))
        )
        .is_err());
        let one = Points::from_scalars(vec![0.0]);
        assert!(fit_predict(&one, &one, &one, &CondExpEstimator::ExactLinear).is_err());
    }

    #[test]
    fn identical_points_return_mean_with_flag() {
        let xs = Points::from_scalars(vec![2.0; 5]);
        let v = Points::from_scalars(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        for est in all_estimators() {
            let est = match est {
                CondExpEstimator::Knn { .. } => CondExpEstimator::Knn { k: 3 },
                other => other,
            };
            let p = fit_predict(&xs, &v, &Points::from_scalars(vec![0.0, 2.0]), &est).unwrap();
            assert!(p.degenerate);
            assert_eq!(p.values.as_slice(), &[3.0, 3.0]);
        }
    }

    #[test]
    fn bandwidth_needs_two_points() {
        assert!(default_bandwidth(&Points::from_scalars(vec![1.0])).is_err());
    }

    #[test]
    fn bandwidth_standard_normal() {
        let n = 10_000;
        let xs = sample_marginal(&PotentialSpec::standard_normal(1), n, RngStream::new(9)).unwrap();
        let h = default_bandwidth(&xs).unwrap();
        let expected = (n as f64).powf(-0.2);
        assert!((h / expected - 1.0).abs() < 0.1, "{h} vs {expected}");
    }

    #[test]
    fn bandwidth_scale_equivariant() {
        let xs = sample_marginal(&PotentialSpec::standard_normal(2), 1000, RngStream::new(4)).unwrap();
        let scaled = Points::new(2, xs.as_slice().iter().map(|v| 10.0 * v).collect()).unwrap();
        let (a, b) = (default_bandwidth(&xs).unwrap(), default_bandwidth(&scaled).unwrap());
        assert!((b / a - 10.0).abs() < 1e-10);
    }

    #[test]
    fn zero_variance_coordinate_hits_floor() {
        let xs = Points::new(2, vec![0.0, 1.0, 1.0, 1.0, 2.0, 1.0]).unwrap();
        let h = default_bandwidth(&xs).unwrap();
        assert!(h > 0.0 && h < 1e-3);
    }

    #[test]
    fn exact_linear_recovers_noise_free_map() {
        let xs = sample_marginal(&PotentialSpec::standard_normal(2), 1000, RngStream::new(8)).unwrap();
        let vals: Vec<f64> = xs
            .rows()
            .flat_map(|r| [0.5 + 2.0 * r[0] - r[1], -1.0 + 0.25 * r[1]])
            .collect();
        let vals = Points::new(2, vals).unwrap();
        let p = fit_predict(&xs, &vals, &xs, &CondExpEstimator::ExactLinear).unwrap();
        for (a, b) in p.values.as_slice().iter().zip(vals.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn tower_property_binning_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in [1usize, 2] {
            let xs = Points::new(d, (0..400 * d).map(|_| rng.random::<f64>()).collect()).unwrap();
            let vals = Points::from_scalars((0..400).map(|_| rng.random::<f64>() * 3.0).collect());
            for est in [
                CondExpEstimator::Binning { bins: 7 },
                CondExpEstimator::ExactLinear,
            ] {
                let p = fit_predict(&xs, &vals, &xs, &est).unwrap();
                assert!((p.values.mean()[0] - vals.mean()[0]).abs() < 1e-10, "{est:?} d={d}");
            }
        }
    }

    #[test]
    fn binning_keeps_ties_together() {
        let xs = Points::from_scalars(vec![0.0, 0.0, 0.0, 1.0, 1.0, 2.0]);
        let v = Points::from_scalars(vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0]);
        let p = fit_predict(&xs, &v, &xs, &CondExpEstimator::Binning { bins: 6 }).unwrap();
        assert_eq!(p.values.as_slice(), &[2.0, 2.0, 2.0, 5.0, 5.0, 8.0]);
    }

    #[test]
    fn nadaraya_watson_fast_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = Points::from_scalars((0..2000).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());
        let vals = Points::new(
            2,
            xs.as_slice().iter().flat_map(|x| [x.sin(), x * x + 3.0]).collect(),
        )
        .unwrap();
        let queries = Points::from_scalars(vec![-2.5, -1.0, 0.0, 0.3, 1.99, 7.0]);
        let fast = nadaraya_watson_1d(&xs, &vals, &queries, 0.1);
        let slow = nadaraya_watson_brute(&xs, &vals, &queries, 0.1);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn nadaraya_watson_quadratic_regression() {
        // Brute-force local averaging on a fine uniform grid gives the oracle
        // E[X^2 | X = 0.5] smoothed by the kernel: 0.25 + h^2/5.
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let vals: Vec<f64> = xs
            .iter()
            .map(|x| x * x + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let xs = Points::from_scalars(xs);
        let vals = Points::from_scalars(vals);
        let est = CondExpEstimator::NadarayaWatson(Bandwidth::Silverman { scale: 1.0 });
        let out = fit_predict(&xs, &vals, &Points::from_scalars(vec![0.5]), &est).unwrap();
        let h = default_bandwidth(&xs).unwrap();
        let grid: Vec<f64> = (0..=20_000).map(|i| -1.0 + 2.0 * i as f64 / 20_000.0).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for &g in &grid {
            let w = (1.0 - ((g - 0.5) / h).powi(2)).max(0.0);
            num += w * g * g;
            den += w;
        }
        let oracle = num / den;
        assert!((oracle - 0.25).abs() < 0.01);
        assert!((out.values.as_slice()[0] - 0.25).abs() < 0.05);
        assert!((out.values.as_slice()[0] - oracle).abs() < 0.01);
    }

    #[test]
    fn isolated_query_falls_back_to_nearest() {
        let xs = Points::from_scalars(vec![0.0, 0.1, 0.2, 5.0]);
        let v = Points::from_scalars(vec![1.0, 1.0, 1.0, 9.0]);
        let est = CondExpEstimator::NadarayaWatson(Bandwidth::Fixed(0.5));
        let p = fit_predict(&xs, &v, &Points::from_scalars(vec![2.0, 10.0]), &est).unwrap();
        assert_eq!(p.values.as_slice(), &[1.0, 9.0]);
    }
}
