use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_schro-flow"))
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gaussian_demo.toml")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Stationary cross covariance for unit variances, from the scalar fixed-point
/// equation `s^2 + eps s - 1 = 0`.
fn sigma_plus(eps: f64) -> f64 {
    -eps / 2.0 + (1.0 + eps * eps / 4.0).sqrt()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn demo_with(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    write_config(dir, "edited.toml", &edit(fs::read_to_string(demo()).unwrap()))
}

const SMALL: &str = r#"
[problem]
mu = "gaussian"
nu = "gaussian"
epsilon = 0.5

[sim]
n_particles = 2000
horizon = 0.5
checkpoints = 5
seed = 11

[reference]
oracle = "gaussian"
"#;

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Self {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').map(str::to_string).collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Self { header, rows }
    }

    fn column(&self, name: &str) -> Vec<f64> {
        let k = self.header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
        self.rows.iter().map(|r| r[k].parse().unwrap()).collect()
    }
}

fn marginal_tests_pass(diag: &Csv) -> bool {
    diag.column("max_ks")
        .iter()
        .zip(diag.column("ks_critical"))
        .all(|(k, c)| *k < c)
}

#[test]
fn missing_config_is_usage_error() {
    let o = run(bin().args(["simulate", "--config", "/nonexistent/config.toml"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(code(&run(bin().arg("frobnicate"))), 2);
    assert_eq!(code(&run(bin().args(["simulate", "--bogus"]))), 2);
    assert_eq!(code(&run(bin().arg("--help"))), 0);
}

#[test]
fn config_syntax_error_reports_position() {
    let dir = TempDir::new().unwrap();
    let p = write_config(dir.path(), "bad.toml", "[problem]\nmu = \"gaussian\"\nnu = \n");
    let o = run(bin().args(["simulate", "--config"]).arg(&p));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn config_semantic_error_reports_key() {
    let dir = TempDir::new().unwrap();
    let p = write_config(dir.path(), "bad.toml", &SMALL.replace("epsilon = 0.5", "epsilon = 0.0"));
    let o = run(bin().args(["simulate", "--config"]).arg(&p));
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("line 5") && e.contains("epsilon"), "{e}");
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = run(bin().env("SCHRO_FLOW_THREADS", "zero").args(["constants", "--alpha-u", "1", "--alpha-v", "1", "--eps", "1"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn demo_config_tracks_stationary_cross_moment() {
    let dir = TempDir::new().unwrap();
    let o = run(bin().args(["simulate", "--config"]).arg(demo()).arg("--out-dir").arg(dir.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["trajectory.csv", "diagnostics.csv", "plots/entropy.svg", "plots/ks.svg", "plots/drift.svg"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let diag = Csv::read(&dir.path().join("diagnostics.csv"));
    let cross = *diag.column("cross_00").last().unwrap();
    assert!((cross - sigma_plus(0.5)).abs() < 0.02, "E[XY] = {cross}");
    let traj = Csv::read(&dir.path().join("trajectory.csv"));
    assert_eq!(traj.rows.len(), diag.rows.len());

    let other = TempDir::new().unwrap();
    let o = run(bin().args(["simulate", "--config"]).arg(demo()).arg("--out-dir").arg(other.path()).args(["--seed", "3"]));
    assert_eq!(code(&o), 0);
    let diag2 = Csv::read(&other.path().join("diagnostics.csv"));
    assert_ne!(diag.column("cross_00"), diag2.column("cross_00"));
    assert_eq!(marginal_tests_pass(&diag), marginal_tests_pass(&diag2));
}

#[test]
fn outputs_are_deterministic_and_thread_independent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let mut csvs = Vec::new();
    for (k, threads) in ["1", "1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let o = run(bin()
            .env("SCHRO_FLOW_THREADS", threads)
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csvs.push((
            fs::read(out.join("trajectory.csv")).unwrap(),
            fs::read(out.join("diagnostics.csv")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
}

#[test]
fn snapshots_written_when_requested() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &format!("{SMALL}\n[outputs]\nsnapshots = true\nplots = false\n"));
    let out = dir.path().join("out");
    let o = run(bin().args(["simulate", "--config"]).arg(&cfg).arg("--out-dir").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snap = fs::read(out.join("snapshot_005.bin")).unwrap();
    assert_eq!(&snap[..2], b"SF");
    assert_eq!(u16::from_le_bytes([snap[2], snap[3]]), 2);
    assert_eq!(u32::from_le_bytes(snap[4..8].try_into().unwrap()), 2000);
    assert_eq!(snap.len(), 16 + 2000 * 2 * 8);
    assert!(!out.join("plots").exists());
}

fn constants(args: &[&str]) -> Output {
    run(bin().arg("constants").args(args))
}

fn table_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key).filter(|r| r.starts_with(' ')).map(|r| r.trim().to_string()))
        .unwrap_or_else(|| panic!("no row {key} in\n{text}"))
}

#[test]
fn constants_above_threshold() {
    let o = constants(&["--alpha-u", "1", "--alpha-v", "1", "--eps", "2"]);
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    let k: f64 = table_value(&t, "kappa_x_given_y").parse().unwrap();
    assert!((k - 2.0).abs() < 1e-12);
    let (kx, ky, eps) = (2.0, 2.0, 2.0);
    let r_expected = eps * (kx + ky) * (1.0 - 4.0 / (eps * eps * kx * ky));
    let r: f64 = table_value(&t, "r").parse().unwrap();
    assert!((r - r_expected).abs() < 1e-9);
    assert_eq!(table_value(&t, "rate condition"), "met");
}

#[test]
fn constants_below_threshold() {
    let o = constants(&["--alpha-u", "1", "--alpha-v", "1", "--eps", "0.5"]);
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    assert_eq!(table_value(&t, "r").parse::<f64>().unwrap(), 0.0);
    assert!(table_value(&t, "rate condition").starts_with("not met"));
}

#[test]
fn constants_gaussian_threshold_is_zero() {
    let o = constants(&["--alpha-u", "2", "--alpha-v", "3", "--beta-u", "2", "--beta-v", "3", "--eps", "0.1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(table_value(&stdout(&o), "eps_c").parse::<f64>().unwrap(), 0.0);
}

#[test]
fn constants_invalid_flags_name_the_flag() {
    for (args, flag) in [
        (vec!["--alpha-u", "0", "--alpha-v", "1", "--eps", "1"], "--alpha-u"),
        (vec!["--alpha-u", "-1", "--alpha-v", "1", "--eps", "1"], "--alpha-u"),
        (vec!["--alpha-u", "1", "--alpha-v", "1", "--beta-v", "0.5", "--eps", "1"], "--beta-v"),
        (vec!["--alpha-u", "1", "--alpha-v", "1", "--l-u", "-2", "--eps", "1"], "--l-u"),
        (vec!["--alpha-u", "1", "--alpha-v", "1", "--eps", "0"], "--eps"),
    ] {
        let o = constants(&args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(stderr(&o).contains(flag), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn constants_csv_sweep_and_json() {
    let o = constants(&["--alpha-u", "1", "--alpha-v", "1", "--eps", "0.5,1,2,4", "--csv"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let cols = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
    let r: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(r.windows(2).all(|w| w[0] <= w[1]));

    let o = constants(&["--alpha-u", "1", "--alpha-v", "1", "--eps", "2", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v[0]["r"].as_f64().unwrap(), 6.0);
}

#[test]
fn constants_profile_inputs() {
    let o = constants(&["--alpha-u", "1", "--alpha-v", "1", "--l-u", "1", "--r-u", "1", "--eps", "1000"]);
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    assert!(table_value(&t, "r").parse::<f64>().unwrap() > 0.0);
    assert_eq!(table_value(&t, "eps_c"), "-");
}

fn crosscheck_json(cfg: &Path, out: &Path) -> (i32, Value) {
    let o = run(bin().args(["crosscheck", "--json", "--config"]).arg(cfg).arg("--out-dir").arg(out));
    let v = serde_json::from_str(&stdout(&o)).unwrap_or(Value::Null);
    (code(&o), v)
}

fn check_value(report: &Value, name: &str) -> f64 {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))["value"]
        .as_f64()
        .unwrap()
}

#[test]
fn crosscheck_default_passes() {
    let dir = TempDir::new().unwrap();
    let (c, v) = crosscheck_json(&demo(), dir.path());
    assert_eq!(c, 0, "{v}");
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
}

/// Verdicts on coarse grids must agree with the error measured against the
/// default fine grid.
#[test]
fn crosscheck_coarse_grids_follow_refinement_oracle() {
    let dir = TempDir::new().unwrap();
    let fine = crosscheck_json(&demo(), &dir.path().join("fine")).1;
    let fine_cross = fine["sinkhorn_cross"][0].as_f64().unwrap();
    for (nodes, expect_fail) in [(16, false), (8, true)] {
        let cfg = demo_with(dir.path(), |t| t.replace("[reference]", &format!("[reference]\ngrid_nodes = {nodes}")));
        let (c, v) = crosscheck_json(&cfg, &dir.path().join(format!("g{nodes}")));
        let coarse_cross = v["sinkhorn_cross"][0].as_f64().unwrap();
        let refinement_error = (coarse_cross - fine_cross).abs() / fine_cross.abs();
        assert_eq!(refinement_error > 0.01, expect_fail, "nodes {nodes}: {refinement_error}");
        assert_eq!(c, if expect_fail { 1 } else { 0 }, "nodes {nodes}: {v}");
        assert_eq!(check_value(&v, "sinkhorn_vs_oracle_cross") > 0.01, expect_fail);
    }
}

#[test]
fn crosscheck_needs_two_methods() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "mm.toml",
        &SMALL
            .replace("seed = 11", "seed = 11\nvariant = \"multimarginal\"\nslots = 3")
            .replace("oracle = \"gaussian\"", "oracle = \"none\""),
    );
    let o = run(bin().args(["crosscheck", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn sinkhorn_writes_potentials_and_coupling() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "s.toml", &SMALL.replace("[reference]", "[reference]\ngrid_nodes = 64"));
    let o = run(bin().args(["sinkhorn", "--json", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["converged"], true);
    assert!((v["cross"][0].as_f64().unwrap() - sigma_plus(0.5)).abs() < 1e-3);
    let pots = Csv::read(&dir.path().join("potentials.csv"));
    assert_eq!(pots.rows.len(), 128);
    let bin = fs::read(dir.path().join("coupling.bin")).unwrap();
    assert_eq!(u64::from_le_bytes(bin[0..8].try_into().unwrap()), 64);
    assert_eq!(u64::from_le_bytes(bin[8..16].try_into().unwrap()), 64);
    assert_eq!(bin.len(), 24 + 64 * 64 * 8);
}

#[test]
fn riccati_reaches_stationary_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "r.toml", &SMALL.replace("horizon = 0.5", "horizon = 20.0"));
    let o = run(bin().args(["riccati", "--json", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["terminal_sigma"][0].as_f64().unwrap() - sigma_plus(0.5)).abs() < 1e-8);
    assert!((v["stationary_sigma"][0].as_f64().unwrap() - sigma_plus(0.5)).abs() < 1e-9);
    let csv = Csv::read(&dir.path().join("riccati.csv"));
    let h = csv.column("entropy_vs_pi");
    assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-15));
}

#[test]
fn riccati_rejects_non_gaussian_problem() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.toml",
        &SMALL.replace("mu = \"gaussian\"", "mu = \"mixture\"").replace("oracle = \"gaussian\"", "oracle = \"none\""),
    );
    let o = run(bin().args(["riccati", "--config"]).arg(&cfg));
    assert_eq!(code(&o), 2);
}
