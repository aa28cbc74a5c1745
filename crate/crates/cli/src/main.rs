mod svg;

use anyhow::anyhow;
use nalgebra::{DMatrix, DVector};
use clap::{Args, Parser, Subcommand};
use schro_flow::config::{ExperimentConfig, Oracle};
use schro_flow::diagnostics::{DiagnosticsReport, Reference};
use schro_flow::gaussian::{entropic_ot_gaussian_stationary, integrate_riccati, RiccatiState};
use schro_flow::integrator::{simulate, InitialCoupling, Trajectory};
use schro_flow::lsi::{logconcave_report, suff_condition_profiles, ConvexityProfile, RateReport};
use schro_flow::model::UpperBound;
use schro_flow::sinkhorn::{
    grad_phi_via_conditional, grad_psi_via_conditional, sinkhorn, write_coupling_binary, write_potentials_csv, GridMeasure, SinkhornSolution};
use schro_flow::Error;
use serde_json::{json, Value};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "schro-flow", version, about = "Projected Langevin dynamics for entropic optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system and write trajectory and diagnostics files.
    Simulate(RunArgs),
    /// Compare particles, the Gaussian oracle and the grid solver.
    Crosscheck(RunArgs),
    /// Solve the grid problem and write potentials and coupling.
    Sinkhorn(RunArgs),
    /// Integrate the Gaussian covariance flow.
    Riccati(RunArgs),
    /// Print convergence constants for given marginal bounds.
    Constants(ConstantsArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ConstantsArgs {
    #[arg(long)]
    alpha_u: f64,
    #[arg(long)]
    alpha_v: f64,
    #[arg(long, default_value_t = f64::INFINITY)]
    beta_u: f64,
    #[arg(long, default_value_t = f64::INFINITY)]
    beta_v: f64,
    #[arg(long, default_value_t = 0.0)]
    l_u: f64,
    #[arg(long, default_value_t = 0.0)]
    r_u: f64,
    #[arg(long, default_value_t = 0.0)]
    l_v: f64,
    #[arg(long, default_value_t = 0.0)]
    r_v: f64,
    /// One or more comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
    /// One CSV row per epsilon instead of a table.
    #[arg(long, conflicts_with = "json")]
    csv: bool,
    #[arg(long)]
    json: bool,
}

enum Failure {
    /// Exit code 2.
    Usage(anyhow::Error),
    /// Exit code 1.
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Crosscheck(a) => cmd_crosscheck(&a),
        Command::Sinkhorn(a) => cmd_sinkhorn(&a),
        Command::Riccati(a) => cmd_riccati(&a),
        Command::Constants(a) => cmd_constants(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Failure::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("SCHRO_FLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(anyhow!("SCHRO_FLOW_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_path(&args.config).map_err(|e| {
        Failure::Usage(match e {
            Error::Io(io) => anyhow!("cannot read {}: {io}", args.config.display()),
            other => anyhow!("{}: {other}", args.config.display()),
        })
    })?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.outputs.directory = dir.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.outputs.directory);
    fs::create_dir_all(&dir).map_err(|e| runtime(anyhow!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> schro_flow::Result<()>) -> CmdResult {
    let file = File::create(path).map_err(|e| runtime(anyhow!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(runtime)?;
    w.flush().map_err(runtime)
}

fn gaussian_covariances(cfg: &ExperimentConfig) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
    let p = &cfg.problem;
    if p.is_gaussian() && p.marginals.len() == 2 {
        Some((p.mu().covariance()?, p.nu().covariance()?))
    } else {
        None
    }
}

fn stationary(cfg: &ExperimentConfig) -> Result<RiccatiState, Failure> {
    let (a, b) = gaussian_covariances(cfg)
        .ok_or_else(|| Failure::Usage(anyhow!("the Gaussian oracle needs quadratic potentials and cost")))?;
    entropic_ot_gaussian_stationary(a, b, cfg.sim.epsilon).map_err(runtime)
}

fn solve_grid(cfg: &ExperimentConfig) -> Result<SinkhornSolution, Failure> {
    let p = &cfg.problem;
    if p.marginals.len() != 2 {
        return Err(Failure::Usage(anyhow!("the grid solver handles two marginals")));
    }
    GridMeasure::default_count(p.dim()).map_err(|e| Failure::Usage(e.into()))?;
    let n = cfg.reference.grid_nodes;
    let mu = GridMeasure::from_potential(p.mu(), n).map_err(runtime)?;
    let nu = GridMeasure::from_potential(p.nu(), n).map_err(runtime)?;
    sinkhorn(
        &mu,
        &nu,
        &p.cost,
        cfg.sim.epsilon,
        cfg.reference.sinkhorn_tol,
        cfg.reference.sinkhorn_max_iter,
    )
    .map_err(runtime)
}

fn reference(cfg: &ExperimentConfig) -> Result<Reference, Failure> {
    Ok(match cfg.reference.oracle {
        Oracle::Gaussian => Reference::Gaussian(stationary(cfg)?),
        Oracle::Sinkhorn => Reference::Grid(solve_grid(cfg)?),
        Oracle::None => Reference::None,
    })
}

fn run_particles(cfg: &ExperimentConfig, dir: &Path) -> Result<Trajectory, Failure> {
    simulate(&cfg.problem, &cfg.sim).map_err(|e| {
        let path = dir.join("error.txt");
        let _ = fs::write(&path, format!("{e}\n"));
        runtime(anyhow!("{e} (details in {})", path.display()))
    })
}

fn cmd_simulate(args: &RunArgs) -> CmdResult {
    let cfg = load(args)?;
    let dir = out_dir(&cfg)?;
    let reference = reference(&cfg)?;
    let traj = run_particles(&cfg, &dir)?;
    let diag = DiagnosticsReport::from_trajectory(&traj, &cfg.problem, &cfg.sim.estimator, &reference).map_err(runtime)?;

    write_file(&dir.join("trajectory.csv"), |w| traj.write_csv(w))?;
    write_file(&dir.join("diagnostics.csv"), |w| diag.write_csv(w))?;
    if cfg.outputs.snapshots {
        for (k, cloud) in traj.checkpoints.iter().enumerate() {
            write_file(&dir.join(format!("snapshot_{k:03}.bin")), |w| cloud.write_binary(w))?;
        }
    }
    if cfg.outputs.plots {
        write_plots(&dir.join("plots"), &diag)?;
    }

    let last = diag.records.last().expect("at least one checkpoint");
    let max_ks = diag
        .records
        .iter()
        .flat_map(|r| r.ks.iter().flatten())
        .copied()
        .fold(f64::NAN, f64::max);
    let cross = last.cross[(0, 0)];
    let target = match &reference {
        Reference::Gaussian(s) => Some(s.sigma[(0, 0)]),
        Reference::Grid(sol) => Some(sol.cross_moment()[(0, 0)]),
        Reference::None => None,
    };
    if args.json {
        let v = json!({
            "output_dir": dir.display().to_string(),
            "checkpoints": diag.records.len(),
            "terminal_cross": cross,
            "reference_cross": target,
            "max_ks": finite_or_null(max_ks),
            "ks_critical": diag.ks_critical,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else {
        println!("wrote {}", dir.display());
        println!("terminal E[XY]    {cross:.6}");
        if let Some(t) = target {
            println!("reference E[XY]   {t:.6}");
        }
        if max_ks.is_finite() {
            println!("max KS            {max_ks:.6} (1% critical {:.6})", diag.ks_critical);
        }
    }
    Ok(())
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn write_plots(dir: &Path, diag: &DiagnosticsReport) -> CmdResult {
    fs::create_dir_all(dir).map_err(runtime)?;
    let series = |f: &dyn Fn(&schro_flow::diagnostics::CheckpointRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        diag.records.iter().filter_map(|r| f(r).map(|v| (r.t, v))).collect()
    };
    let entropy = series(&|r| r.entropy.map(|e| e.value.max(f64::MIN_POSITIVE).ln()));
    let ks = series(&|r| r.ks.iter().flatten().copied().reduce(f64::max));
    let drift = series(&|r| r.drift.map(|d| d.total()));
    let charts = [
        ("entropy.svg", "relative entropy to the reference", "log H", entropy),
        ("ks.svg", "largest marginal KS statistic", "KS", ks),
        ("drift.svg", "drift discrepancy", "discrepancy", drift),
    ];
    for (name, title, label, pts) in charts {
        if pts.is_empty() {
            continue;
        }
        fs::write(dir.join(name), svg::line_chart(title, "t", label, &pts)).map_err(runtime)?;
    }
    Ok(())
}

struct Check {
    name: &'static str,
    value: f64,
    tolerance: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Larger of the relative `L^2` errors of the grid `grad phi` and `grad psi`
/// against the linear Gaussian fields, weighted by the grid marginals.
fn grid_gradient_error(
    sol: &SinkhornSolution,
    sigma: &DMatrix<f64>,
    sigma_mu: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
) -> schro_flow::Result<f64> {
    let d = sigma.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let inv = |m: &DMatrix<f64>| m.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(d, d));
    let sides = [
        (&sol.mu, grad_phi_via_conditional(sol, &sol.cost)?, &id - sigma.transpose() * inv(sigma_mu)),
        (&sol.nu, grad_psi_via_conditional(sol, &sol.cost)?, &id - sigma * inv(sigma_nu)),
    ];
    let mut worst = 0.0f64;
    for (grid, field, a) in sides {
        let (mut err, mut norm) = (0.0, 0.0);
        for (i, w) in grid.weights.iter().enumerate() {
            let x = DVector::from_column_slice(grid.nodes.row(i));
            let exact = &a * x;
            let approx = DVector::from_column_slice(field.row(i));
            err += w * (approx - &exact).norm_squared();
            norm += w * exact.norm_squared();
        }
        worst = worst.max((err / norm).sqrt());
    }
    Ok(worst)
}

fn cmd_crosscheck(args: &RunArgs) -> CmdResult {
    let cfg = load(args)?;
    let p = &cfg.problem;
    let two = p.marginals.len() == 2;
    let has_oracle = gaussian_covariances(&cfg).is_some();
    let has_grid = two && GridMeasure::default_count(p.dim()).is_ok();
    let methods = usize::from(two) + usize::from(has_oracle) + usize::from(has_grid);
    if methods < 2 {
        return Err(Failure::Usage(anyhow!(
            "crosscheck needs at least two applicable methods; this problem admits {methods}"
        )));
    }
    let dir = out_dir(&cfg)?;
    let traj = run_particles(&cfg, &dir)?;
    let particle = traj.last().cross[0].clone();
    let oracle = if has_oracle { Some(stationary(&cfg)?.sigma) } else { None };
    let grid = if has_grid { Some(solve_grid(&cfg)?) } else { None };
    let tol = &cfg.crosscheck;

    let mut checks = Vec::new();
    if let Some(o) = &oracle {
        checks.push(Check {
            name: "particle_vs_oracle",
            value: max_abs_diff(&particle, o),
            tolerance: tol.particle_vs_oracle,
        });
    }
    if let Some(sol) = &grid {
        let g = sol.cross_moment();
        if let (Some(o), Some((a, b))) = (&oracle, gaussian_covariances(&cfg)) {
            checks.push(Check {
                name: "sinkhorn_vs_oracle_cross",
                value: max_abs_diff(&g, o) / o.amax(),
                tolerance: tol.sinkhorn_vs_oracle,
            });
            checks.push(Check {
                name: "sinkhorn_vs_oracle_grad",
                value: grid_gradient_error(sol, o, a, b).map_err(runtime)?,
                tolerance: tol.sinkhorn_vs_oracle,
            });
        }
        checks.push(Check {
            name: "particle_vs_sinkhorn",
            value: max_abs_diff(&particle, &g),
            tolerance: tol.particle_vs_sinkhorn,
        });
        if !sol.converged {
            checks.push(Check {
                name: "sinkhorn_converged",
                value: sol.residuals.last().copied().unwrap_or(f64::INFINITY),
                tolerance: cfg.reference.sinkhorn_tol,
            });
        }
    }
    let all = checks.iter().all(Check::passed);

    if args.json {
        let v = json!({
            "particle_cross": particle.iter().copied().collect::<Vec<_>>(),
            "oracle_cross": oracle.as_ref().map(|o| o.iter().copied().collect::<Vec<_>>()),
            "sinkhorn_cross": grid.as_ref().map(|s| s.cross_moment().iter().copied().collect::<Vec<_>>()),
            "checks": checks.iter().map(|c| json!({
                "name": c.name,
                "value": c.value,
                "tolerance": c.tolerance,
                "pass": c.passed(),
            })).collect::<Vec<_>>(),
            "pass": all,
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else {
        println!("{:<22} {:>14} {:>12}  result", "check", "value", "tolerance");
        for c in &checks {
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            println!("{:<22} {:>14.6e} {:>12.3e}  {verdict}", c.name, c.value, c.tolerance);
        }
    }
    if all {
        Ok(())
    } else {
        Err(runtime(anyhow!("cross-method check failed")))
    }
}

fn cmd_sinkhorn(args: &RunArgs) -> CmdResult {
    let cfg = load(args)?;
    let sol = solve_grid(&cfg)?;
    let dir = out_dir(&cfg)?;
    write_file(&dir.join("potentials.csv"), |w| write_potentials_csv(&sol, w))?;
    write_file(&dir.join("coupling.bin"), |w| write_coupling_binary(&sol, w))?;
    let residual = sol.residuals.last().copied().unwrap_or(f64::NAN);
    let cross = sol.cross_moment();
    if args.json {
        let v = json!({
            "output_dir": dir.display().to_string(),
            "iterations": sol.iterations,
            "residual": finite_or_null(residual),
            "converged": sol.converged,
            "cross": cross.iter().copied().collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else {
        println!("wrote {}", dir.display());
        println!("iterations  {}", sol.iterations);
        println!("residual    {residual:.3e}");
        println!("E[XY]       {:.6}", cross[(0, 0)]);
    }
    if sol.converged {
        Ok(())
    } else {
        Err(runtime(anyhow!("Sinkhorn did not reach tolerance {}", cfg.reference.sinkhorn_tol)))
    }
}

fn cmd_riccati(args: &RunArgs) -> CmdResult {
    let cfg = load(args)?;
    let target = stationary(&cfg)?;
    let (a, b) = gaussian_covariances(&cfg).expect("checked by stationary");
    let start = RiccatiState::product(a.clone(), b.clone(), cfg.sim.epsilon).map_err(runtime)?;
    let start = match &cfg.sim.init {
        InitialCoupling::Product => start,
        InitialCoupling::Gaussian { cross } => start.with_sigma(cross.clone()),
        InitialCoupling::Comonotone => {
            let s = (a[(0, 0)] * b[(0, 0)]).sqrt();
            start.with_sigma(DMatrix::from_element(1, 1, s))
        }
    };
    let traj = integrate_riccati(&start, cfg.sim.horizon, cfg.sim.dt).map_err(runtime)?;
    let dir = out_dir(&cfg)?;
    write_file(&dir.join("riccati.csv"), |w| traj.write_csv(&target, w))?;
    let end = traj.terminal().sigma;
    if args.json {
        let v = json!({
            "output_dir": dir.display().to_string(),
            "terminal_sigma": end.iter().copied().collect::<Vec<_>>(),
            "stationary_sigma": target.sigma.iter().copied().collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else {
        println!("wrote {}", dir.display());
        println!("terminal sigma    {:?}", end.iter().collect::<Vec<_>>());
        println!("stationary sigma  {:?}", target.sigma.iter().collect::<Vec<_>>());
    }
    Ok(())
}

fn flag_check(ok: bool, flag: &str, msg: &str) -> CmdResult {
    if ok {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!("--{flag}: {msg}")))
    }
}

fn cmd_constants(a: &ConstantsArgs) -> CmdResult {
    for (flag, v) in [("alpha-u", a.alpha_u), ("alpha-v", a.alpha_v)] {
        flag_check(v > 0.0 && v.is_finite(), flag, "must be positive and finite")?;
    }
    for (flag, b, alpha) in [("beta-u", a.beta_u, a.alpha_u), ("beta-v", a.beta_v, a.alpha_v)] {
        flag_check(b >= alpha, flag, "must be at least the matching alpha")?;
    }
    for (flag, v) in [("l-u", a.l_u), ("r-u", a.r_u), ("l-v", a.l_v), ("r-v", a.r_v)] {
        flag_check(v >= 0.0 && v.is_finite(), flag, "must be nonnegative and finite")?;
    }
    for &e in &a.eps {
        flag_check(e > 0.0 && e.is_finite(), "eps", "must be positive and finite")?;
    }
    let (bu, bv) = (UpperBound::from_value(a.beta_u), UpperBound::from_value(a.beta_v));
    let log_concave = a.l_u == 0.0 && a.r_u == 0.0 && a.l_v == 0.0 && a.r_v == 0.0;
    let u = ConvexityProfile::new(a.alpha_u, a.l_u, a.r_u, bu).map_err(|e| Failure::Usage(e.into()))?;
    let v = ConvexityProfile::new(a.alpha_v, a.l_v, a.r_v, bv).map_err(|e| Failure::Usage(e.into()))?;

    let mut rows = Vec::new();
    for &eps in &a.eps {
        let profile = suff_condition_profiles(&u, &v, eps);
        let main = if log_concave {
            logconcave_report(a.alpha_u, a.alpha_v, bu, bv, eps).map_err(runtime)?
        } else {
            profile.as_ref().map_err(|e| runtime(anyhow!("{e}")))?.clone()
        };
        rows.push((eps, main, profile.ok()));
    }

    if a.json {
        let v: Vec<Value> = rows.iter().map(|(eps, m, p)| row_json(*eps, m, p.as_ref())).collect();
        println!("{}", serde_json::to_string_pretty(&v).map_err(runtime)?);
    } else if a.csv {
        println!("{}", CSV_COLUMNS.join(","));
        for (eps, m, p) in &rows {
            let cells: Vec<String> = row_values(*eps, m, p.as_ref())
                .into_iter()
                .map(|(_, v)| v.map_or(String::new(), |v| format!("{v:.16e}")))
                .collect();
            println!("{}", cells.join(","));
        }
    } else {
        for (i, (eps, m, p)) in rows.iter().enumerate() {
            if i > 0 {
                println!();
            }
            for (name, v) in row_values(*eps, m, p.as_ref()) {
                let shown = v.map_or_else(|| "-".to_string(), |v| format!("{v:.12}"));
                println!("{name:<24} {shown}");
            }
            let verdict = if m.condition_met { "met" } else { "not met, no rate guaranteed" };
            println!("{:<24} {verdict}", "rate condition");
        }
    }
    Ok(())
}

const CSV_COLUMNS: [&str; 13] = [
    "eps",
    "kappa_x_given_y",
    "kappa_y_given_x",
    "r",
    "condition_met",
    "eps_c",
    "alpha_phi_bar",
    "alpha_psi_bar",
    "phi_in_bracket",
    "psi_in_bracket",
    "lipschitz_x_given_y",
    "lipschitz_y_given_x",
    "profile_condition_met",
];

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn row_values(eps: f64, m: &RateReport, p: Option<&RateReport>) -> Vec<(&'static str, Option<f64>)> {
    let brackets = p.and_then(|p| p.fixed_points_in_bracket);
    let values = [
        Some(eps),
        Some(m.kappa_x_given_y),
        Some(m.kappa_y_given_x),
        Some(m.r),
        Some(flag(m.condition_met)),
        m.epsilon_c,
        p.and_then(|p| p.alpha_phi_bar),
        p.and_then(|p| p.alpha_psi_bar),
        brackets.map(|b| flag(b.0)),
        brackets.map(|b| flag(b.1)),
        p.and_then(|p| p.lipschitz_x_given_y),
        p.and_then(|p| p.lipschitz_y_given_x),
        p.and_then(|p| p.profile_condition_met).map(flag),
    ];
    CSV_COLUMNS.into_iter().zip(values).collect()
}

fn row_json(eps: f64, m: &RateReport, p: Option<&RateReport>) -> Value {
    let map: serde_json::Map<String, Value> = row_values(eps, m, p)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.map_or(Value::Null, |v| finite_or_null(v))))
        .collect();
    Value::Object(map)
}
