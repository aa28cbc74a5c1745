//! Experiment configuration files: flat sections of `key = value` pairs.
//!
//! ```toml
//! [problem]
//! dim = 1
//! mu = "gaussian"
//! mu_covariance = [1.0]
//! nu = "gaussian"
//! nu_covariance = [1.0]
//! cost = "quadratic"
//! epsilon = 0.5
//!
//! [sim]
//! n_particles = 100000
//! horizon = 10.0
//! checkpoints = 20
//!
//! [reference]
//! oracle = "gaussian"
//! ```

use crate::condexp::{Bandwidth, CondExpEstimator};
use crate::error::{Error, Result};
use crate::gaussian::entropic_ot_gaussian_stationary;
use crate::integrator::{default_dt, InitialCoupling, SimConfig, Variant};
use crate::model::{AnalyticPotential, CostSpec, PotentialSpec, Problem};
use crate::sinkhorn::GridMeasure;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: RawProblem,
    #[serde(default)]
    pub sim: RawSim,
    #[serde(default)]
    pub reference: RawReference,
    #[serde(default)]
    pub outputs: RawOutputs,
    #[serde(default)]
    pub crosscheck: RawCrosscheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    #[serde(default = "one")]
    pub dim: usize,
    pub mu: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_covariance: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_strength: Option<f64>,
    pub nu: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_covariance: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_strength: Option<f64>,
    #[serde(default = "quadratic")]
    pub cost: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_delta: Option<f64>,
    pub epsilon: f64,
}

impl Default for RawProblem {
    fn default() -> Self {
        Self {
            dim: 1,
            mu: "gaussian".into(),
            mu_covariance: None,
            mu_offset: None,
            mu_strength: None,
            nu: "gaussian".into(),
            nu_covariance: None,
            nu_offset: None,
            nu_strength: None,
            cost: "quadratic".into(),
            cost_delta: None,
            epsilon: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSim {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of equally spaced checkpoints; ignored if `checkpoint_times` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawReference {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_max_iter: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plots: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCrosscheck {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particle_vs_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinkhorn_vs_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particle_vs_sinkhorn: Option<f64>,
}

fn one() -> usize {
    1
}

fn quadratic() -> String {
    "quadratic".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    Gaussian,
    Sinkhorn,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub oracle: Oracle,
    pub grid_nodes: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub directory: String,
    pub plots: bool,
    pub snapshots: bool,
}

/// Tolerances of the cross-method report: absolute on `E[XY]` between the
/// particles and the Gaussian oracle, relative between the grid and the
/// oracle, absolute between the particles and the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CrosscheckConfig {
    pub particle_vs_oracle: f64,
    pub sinkhorn_vs_oracle: f64,
    pub particle_vs_sinkhorn: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub problem: Problem,
    pub sim: SimConfig,
    pub reference: ReferenceConfig,
    pub outputs: OutputConfig,
    pub crosscheck: CrosscheckConfig,
}

/// 1-based line and column of byte offset `pos`.
fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let before = &text[..pos.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// Position of `key` inside `[section]`, or of the section header, for
/// reporting semantic errors.
fn key_position(text: &str, section: &str, key: &str) -> (usize, usize) {
    let header = format!("[{section}]");
    let mut in_section = false;
    let mut section_line = 0;
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim_start();
        if trimmed.starts_with('[') {
            in_section = trimmed.starts_with(&header);
            if in_section {
                section_line = n + 1;
            }
            continue;
        }
        if in_section {
            if let Some(rest) = trimmed.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return (n + 1, line.len() - trimmed.len() + 1);
                }
            }
        }
    }
    (section_line, 1)
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> Error {
        let (line, column) = key_position(self.text, section, key);
        Error::Config {
            line,
            column,
            message: format!("{section}.{key}: {}", message.into()),
        }
    }

    fn lift<T>(&self, section: &str, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.err(section, key, e.to_string()))
    }
}

fn square(values: &[f64], dim: usize) -> Option<DMatrix<f64>> {
    (values.len() == dim * dim).then(|| DMatrix::from_row_slice(dim, dim, values))
}

fn potential(
    ctx: &Ctx,
    side: &str,
    kind: &str,
    cov: &Option<Vec<f64>>,
    offset: Option<f64>,
    strength: Option<f64>,
    dim: usize,
) -> Result<PotentialSpec> {
    match kind {
        "gaussian" => {
            let key = format!("{side}_covariance");
            let m = match cov {
                Some(v) => square(v, dim)
                    .ok_or_else(|| ctx.err("problem", &key, format!("need {} entries, got {}", dim * dim, v.len())))?,
                None => DMatrix::identity(dim, dim),
            };
            ctx.lift("problem", &key, PotentialSpec::gaussian(m))
        }
        "mixture" => {
            if dim != 1 {
                return Err(ctx.err("problem", side, "symmetric mixtures are one-dimensional"));
            }
            Ok(PotentialSpec::symmetric_mixture(offset.unwrap_or(1.5)))
        }
        "cosh-perturbed" | "quartic" => {
            let p = ctx.lift(
                "problem",
                &format!("{side}_strength"),
                AnalyticPotential::from_name(kind, strength.unwrap_or(0.5)),
            )?;
            ctx.lift("problem", side, PotentialSpec::analytic(p, dim))
        }
        other => Err(ctx.err(
            "problem",
            side,
            format!("unknown marginal `{other}` (gaussian, mixture, cosh-perturbed, quartic)"),
        )),
    }
}

fn estimator(ctx: &Ctx, s: &RawSim) -> Result<CondExpEstimator> {
    let name = s.estimator.as_deref().unwrap_or("exact-linear");
    Ok(match name {
        "exact-linear" => CondExpEstimator::ExactLinear,
        "nadaraya-watson" => CondExpEstimator::NadarayaWatson(match (s.bandwidth, s.bandwidth_scale) {
            (Some(h), _) => {
                if !(h > 0.0) {
                    return Err(ctx.err("sim", "bandwidth", "must be positive"));
                }
                Bandwidth::Fixed(h)
            }
            (None, scale) => Bandwidth::Silverman {
                scale: scale.unwrap_or(1.0),
            },
        }),
        "knn" => CondExpEstimator::Knn { k: s.k.unwrap_or(50) },
        "binning" => CondExpEstimator::Binning {
            bins: s.bins.unwrap_or(64),
        },
        other => {
            return Err(ctx.err(
                "sim",
                "estimator",
                format!("unknown estimator `{other}` (exact-linear, nadaraya-watson, knn, binning)"),
            ))
        }
    })
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Config {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        Self::resolve(raw, text)
    }

    /// Serialises the raw configuration back to text.
    pub fn to_text(&self) -> String {
        toml::to_string(&self.raw).expect("plain data serialises")
    }

    fn resolve(raw: RawConfig, text: &str) -> Result<Self> {
        let ctx = Ctx { text };
        let p = &raw.problem;
        if p.dim == 0 {
            return Err(ctx.err("problem", "dim", "must be positive"));
        }
        if !(p.epsilon > 0.0) {
            return Err(ctx.err("problem", "epsilon", "must be positive"));
        }
        let mu = potential(&ctx, "mu", &p.mu, &p.mu_covariance, p.mu_offset, p.mu_strength, p.dim)?;
        let nu = potential(&ctx, "nu", &p.nu, &p.nu_covariance, p.nu_offset, p.nu_strength, p.dim)?;
        let cost = ctx.lift("problem", "cost", CostSpec::from_name(&p.cost, p.cost_delta.unwrap_or(1.0)))?;

        let s = &raw.sim;
        let variant = match s.variant.as_deref().unwrap_or("standard") {
            "standard" => Variant::Standard,
            "noiseless" => Variant::Noiseless,
            "langevin-unconstrained" => Variant::LangevinUnconstrained,
            "multimarginal" => {
                let m = s.slots.unwrap_or(3);
                if m < 2 {
                    return Err(ctx.err("sim", "slots", "need at least two"));
                }
                Variant::MultiMarginal(m)
            }
            other => return Err(ctx.err("sim", "variant", format!("unknown variant `{other}`"))),
        };
        let mut marginals = vec![mu, nu];
        while marginals.len() < variant.slots() {
            marginals.push(marginals[1].clone());
        }
        let problem = ctx.lift("problem", "mu", Problem::new(marginals, cost))?;

        let horizon = s.horizon.unwrap_or(10.0);
        let mut sim = SimConfig::new(p.epsilon, horizon, s.n_particles.unwrap_or(10_000));
        sim.dt = s.dt.unwrap_or_else(|| default_dt(p.epsilon));
        sim.seed = s.seed.unwrap_or(0);
        sim.variant = variant;
        sim.estimator = estimator(&ctx, s)?;
        sim.checkpoint_times = match (&s.checkpoint_times, s.checkpoints) {
            (Some(t), _) => t.clone(),
            (None, Some(0)) => return Err(ctx.err("sim", "checkpoints", "need at least one")),
            (None, c) => {
                let c = c.unwrap_or(20);
                std::iter::once(0.0)
                    .chain((1..=c).map(|k| horizon * k as f64 / c as f64))
                    .collect()
            }
        };
        let gaussian_problem = problem.is_gaussian() && problem.marginals.len() == 2;
        sim.init = match s.init.as_deref().unwrap_or("product") {
            "product" => InitialCoupling::Product,
            "comonotone" => {
                if p.dim != 1 {
                    return Err(ctx.err("sim", "init", "comonotone initialisation needs dim = 1"));
                }
                InitialCoupling::Comonotone
            }
            "stationary" => {
                if !gaussian_problem {
                    return Err(ctx.err("sim", "init", "stationary initialisation needs a Gaussian two-marginal problem"));
                }
                let (a, b) = (
                    problem.marginals[0].covariance().expect("gaussian"),
                    problem.marginals[1].covariance().expect("gaussian"),
                );
                let st = ctx.lift("sim", "init", entropic_ot_gaussian_stationary(a, b, p.epsilon))?;
                InitialCoupling::Gaussian { cross: st.sigma }
            }
            other => return Err(ctx.err("sim", "init", format!("unknown initialisation `{other}`"))),
        };
        ctx.lift("sim", "horizon", sim.validate())?;

        let r = &raw.reference;
        let oracle = match r.oracle.as_deref().unwrap_or("none") {
            "gaussian" => {
                if !gaussian_problem {
                    return Err(ctx.err("reference", "oracle", "the Gaussian oracle needs quadratic potentials and cost with two marginals"));
                }
                Oracle::Gaussian
            }
            "sinkhorn" => {
                if problem.marginals.len() != 2 {
                    return Err(ctx.err("reference", "oracle", "the grid reference handles two marginals"));
                }
                ctx.lift("reference", "oracle", GridMeasure::default_count(p.dim))?;
                Oracle::Sinkhorn
            }
            "none" => Oracle::None,
            other => return Err(ctx.err("reference", "oracle", format!("unknown oracle `{other}`"))),
        };
        let grid_nodes = match r.grid_nodes {
            Some(n) if n >= 2 => n,
            Some(_) => return Err(ctx.err("reference", "grid_nodes", "need at least two")),
            None => GridMeasure::default_count(p.dim).unwrap_or(64),
        };
        let reference = ReferenceConfig {
            oracle,
            grid_nodes,
            sinkhorn_tol: r.sinkhorn_tol.unwrap_or(1e-12),
            sinkhorn_max_iter: r.sinkhorn_max_iter.unwrap_or(100_000),
        };
        let outputs = OutputConfig {
            directory: raw.outputs.directory.clone().unwrap_or_else(|| "out".into()),
            plots: raw.outputs.plots.unwrap_or(true),
            snapshots: raw.outputs.snapshots.unwrap_or(false),
        };
        let c = &raw.crosscheck;
        let crosscheck = CrosscheckConfig {
            particle_vs_oracle: c.particle_vs_oracle.unwrap_or(0.02),
            sinkhorn_vs_oracle: c.sinkhorn_vs_oracle.unwrap_or(0.01),
            particle_vs_sinkhorn: c.particle_vs_sinkhorn.unwrap_or(0.03),
        };
        Ok(Self {
            raw,
            problem,
            sim,
            reference,
            outputs,
            crosscheck,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
[problem]
dim = 1
mu = "gaussian"
mu_covariance = [1.0]
nu = "gaussian"
epsilon = 0.5

[sim]
n_particles = 1000
horizon = 1.0
checkpoints = 4
seed = 7

[reference]
oracle = "gaussian"
"#;

    #[test]
    fn parses_demo() {
        let c = ExperimentConfig::parse(DEMO).unwrap();
        assert_eq!(c.sim.n_particles, 1000);
        assert_eq!(c.sim.seed, 7);
        assert_eq!(c.sim.checkpoint_times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.sim.dt, 1e-3);
        assert_eq!(c.reference.oracle, Oracle::Gaussian);
        assert_eq!(c.reference.grid_nodes, 256);
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::parse(DEMO).unwrap();
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c.raw, again.raw);
    }

    #[test]
    fn syntax_error_has_position() {
        let text = "[problem]\nmu = \"gaussian\"\nnu = = 1\n";
        match ExperimentConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_error_points_at_key() {
        let text = DEMO.replace("epsilon = 0.5", "epsilon = -1.0");
        match ExperimentConfig::parse(&text) {
            Err(Error::Config { line, column, message }) => {
                assert_eq!((line, column), (7, 1));
                assert!(message.contains("epsilon"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = DEMO.replace("seed = 7", "sead = 7");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn gaussian_oracle_needs_gaussian_problem() {
        let text = DEMO.replace("mu = \"gaussian\"\nmu_covariance = [1.0]", "mu = \"mixture\"");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn multimarginal_repeats_nu() {
        let text = DEMO.replace("seed = 7", "seed = 7\nvariant = \"multimarginal\"\nslots = 3")
            .replace("oracle = \"gaussian\"", "oracle = \"none\"");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.problem.marginals.len(), 3);
        assert_eq!(c.sim.variant, Variant::MultiMarginal(3));
    }
}
