use std::path::Path;
use std::process::Command;

use cvstem::benchmarks::{BenchmarkConfig, ControllerKind};
use cvstem_cli::summary::{aggregate, read_runs, write_csv, RunRow, RUNS_FILE, SUMMARY_FILE};
use cvstem_cli::{run, summarize, verify_bounds, CliError, ExperimentManifest, RunOptions};
use tempfile::tempdir;

const PENDULUM: &str = r#"
name = "pendulum-smoke"
n_runs = 3
controllers = ["pid", "cvstem"]
sweep = [0.5, 0.1]
write_trajectories = false

[config]
benchmark = "pendulum"
controller = "cvstem"
horizon = 4.0
dt_sim = 0.01
dt_ctrl = 0.1
alpha = 0.1
alpha_g = 0.01
c = 0.5
nu_max = 10.0
R = 1.0
gains = { K_P = 4.0, K_I = 0.0, K_D = 4.0, K_1 = 1.0, K_2 = 0.0, Lambda = 1.0 }
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvstem"))
}

fn opts(out: &Path, jobs: Option<usize>) -> RunOptions {
    RunOptions { out: out.to_path_buf(), jobs, seed_base: 0 }
}

fn manifest_for(config: BenchmarkConfig, controllers: Vec<ControllerKind>, n_runs: usize) -> ExperimentManifest {
    ExperimentManifest {
        name: "test".into(),
        n_runs,
        controllers,
        sweep: vec![],
        steady_state_window: 150,
        moving_average_window: 150,
        failure_threshold: 0.1,
        write_trajectories: true,
        config,
    }
}

fn row(controller: ControllerKind, dt_ctrl: f64, seed: u64, ss: f64, effort: f64) -> RunRow {
    RunRow {
        controller,
        dt_ctrl,
        seed,
        ok: true,
        steady_state_error: Some(ss),
        control_effort: Some(effort),
        max_input_norm: Some(1.0),
        solves: 1,
        failed_solves: 0,
    }
}

#[test]
fn unknown_controller_is_a_config_error_naming_it() {
    let text = PENDULUM.replace(r#"controllers = ["pid", "cvstem"]"#, r#"controllers = ["hinf"]"#);
    let err = ExperimentManifest::from_toml(&text).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("hinf"));
    assert_eq!(err.exit_code(), 2);

    let dir = tempdir().unwrap();
    let path = dir.path().join("m.toml");
    std::fs::write(&path, &text).unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hinf"));
}

#[test]
fn unknown_keys_and_bad_sweeps_are_rejected() {
    let extra = PENDULUM.replace("c = 0.5", "c = 0.5\nc_1 = 0.5");
    assert!(matches!(ExperimentManifest::from_toml(&extra), Err(CliError::Config(_))));
    let off_grid = PENDULUM.replace("sweep = [0.5, 0.1]", "sweep = [0.125]");
    assert!(matches!(ExperimentManifest::from_toml(&off_grid), Err(CliError::Config(_))));
    let no_runs = PENDULUM.replace("n_runs = 3", "n_runs = 0");
    assert!(matches!(ExperimentManifest::from_toml(&no_runs), Err(CliError::Config(_))));
    // The scalar plant has no baseline controllers.
    let m = manifest_for(BenchmarkConfig::scalar(ControllerKind::Cvstem), vec![ControllerKind::Pid], 1);
    let dir = tempdir().unwrap();
    assert!(matches!(run(&m, &opts(dir.path(), None)), Err(CliError::Config(_))));
}

#[test]
fn single_noiseless_attitude_run_normalizes_to_one() {
    let mut cfg = BenchmarkConfig::attitude(ControllerKind::Cvstem);
    cfg.horizon = 2.0;
    cfg.noise_scale = 0.0;
    let m = manifest_for(cfg, vec![ControllerKind::Cvstem], 1);
    let dir = tempdir().unwrap();
    let outcome = run(&m, &opts(dir.path(), Some(1))).unwrap();
    assert_eq!(outcome.summary.len(), 1);
    let r = &outcome.summary[0];
    assert_eq!(r.controller, ControllerKind::Cvstem);
    assert_eq!((r.normalized_steady_state_error, r.normalized_control_effort), (1.0, 1.0));
    assert_eq!(r.steady_state_error_std, 0.0);
    let traj = std::fs::read_to_string(dir.path().join("runs/cvstem_dtc0.1/seed_0.csv")).unwrap();
    assert!(traj.starts_with("t,x0,x1,x2,x3,x4,x5,xd0,"));
    assert_eq!(traj.lines().count(), 1 + 201);
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/cvstem_dtc0.1/seed_0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config_hash"], m.hash());
}

#[test]
fn identical_noiseless_runs_have_zero_variance() {
    let mut cfg = BenchmarkConfig::pendulum(ControllerKind::Cvstem);
    cfg.horizon = 3.0;
    cfg.noise_scale = 0.0;
    let m = manifest_for(cfg, vec![ControllerKind::Cvstem, ControllerKind::Nominal], 2);
    let dir = tempdir().unwrap();
    for r in run(&m, &opts(dir.path(), None)).unwrap().summary {
        assert_eq!(r.steady_state_error_std, 0.0);
        assert_eq!(r.control_effort_std, 0.0);
    }
}

#[test]
fn summary_is_byte_identical_across_repeats_and_job_counts() {
    let m = ExperimentManifest::from_toml(PENDULUM).unwrap();
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    run(&m, &opts(a.path(), Some(1))).unwrap();
    run(&m, &opts(b.path(), Some(3))).unwrap();
    for f in [SUMMARY_FILE, RUNS_FILE, "plot_data.csv", "trend.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let summary = std::fs::read_to_string(a.path().join(SUMMARY_FILE)).unwrap();
    let first: Vec<&str> = summary.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["controller", "cvstem", "cvstem", "pid", "pid"]);
}

#[test]
fn steady_state_uses_the_trailing_window() {
    let m = ExperimentManifest::from_toml(PENDULUM).unwrap();
    let m = ExperimentManifest { write_trajectories: true, steady_state_window: 7, controllers: vec![ControllerKind::Pid], ..m };
    let dir = tempdir().unwrap();
    run(&m, &opts(dir.path(), None)).unwrap();
    let rows = read_runs(dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("runs/pid_dtc0.1/seed_2.csv")).unwrap();
    let err: Vec<f64> = rdr.records().map(|r| r.unwrap().iter().last().unwrap().parse().unwrap()).collect();
    let expect = err[err.len() - 7..].iter().sum::<f64>() / 7.0;
    let got = rows.iter().find(|r| r.seed == 2 && r.dt_ctrl == 0.1).unwrap().steady_state_error.unwrap();
    assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
}

#[test]
fn synthetic_results_give_exact_ratios() {
    use ControllerKind::*;
    let rows = vec![
        row(Cvstem, 0.1, 0, 1.0, 10.0),
        row(Cvstem, 0.1, 1, 3.0, 30.0),
        row(Cvstem, 1.0, 0, 4.0, 20.0),
        row(Cvstem, 1.0, 1, 4.0, 20.0),
        row(Pid, 0.1, 0, 5.0, 15.0),
        row(Pid, 0.1, 1, 7.0, 25.0),
    ];
    let dir = tempdir().unwrap();
    write_csv(&dir.path().join(RUNS_FILE), &rows).unwrap();
    let s = summarize(dir.path()).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!((s[0].normalized_steady_state_error, s[0].normalized_control_effort), (1.0, 1.0));
    assert_eq!((s[1].normalized_steady_state_error, s[1].normalized_control_effort), (2.0, 1.0));
    assert_eq!((s[2].normalized_steady_state_error, s[2].normalized_control_effort), (3.0, 1.0));
    assert_eq!(s[1].steady_state_error_std, 0.0);
    assert!((s[0].steady_state_error_std - 2f64.sqrt()).abs() < 1e-15);
    let trend: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("trend.json")).unwrap()).unwrap();
    assert_eq!(trend["trends"][0]["nondecreasing"], true);
    assert_eq!(trend["trends"][0]["end_to_start_ratio"], 2.0);
    // Without a CV-STEM group the first group is the reference.
    let pid_only = aggregate(&rows[4..]).unwrap();
    assert_eq!(pid_only[0].normalized_steady_state_error, 1.0);
}

#[test]
fn empty_results_directory_is_a_no_data_error() {
    let dir = tempdir().unwrap();
    assert!(matches!(summarize(dir.path()), Err(CliError::NoData(_))));
    let out = bin().args(["summarize", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failing_solves_exit_with_code_three_after_writing_results() {
    let text = PENDULUM.replace("nu_max = 10.0", "nu_max = 1e-9").replace(r#"controllers = ["pid", "cvstem"]"#, r#"controllers = ["cvstem"]"#);
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.toml");
    std::fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--config"]).arg(&path).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_runs(&out_dir).unwrap().iter().all(|r| !r.ok));
}

#[test]
fn verify_bounds_on_the_scalar_plant() {
    let mut cfg = BenchmarkConfig::scalar(ControllerKind::Cvstem);
    cfg.horizon = 5.0;
    let m = manifest_for(cfg, vec![ControllerKind::Cvstem], 40);
    let dir = tempdir().unwrap();
    let rep = verify_bounds(&m, &opts(dir.path(), None)).unwrap();
    assert!(rep.passed, "{:?}", rep.violation_fraction);
    assert!(dir.path().join("bounds/verify.csv").exists());

    let att = manifest_for(BenchmarkConfig::attitude(ControllerKind::Cvstem), vec![ControllerKind::Cvstem], 1);
    assert!(matches!(verify_bounds(&att, &opts(dir.path(), None)), Err(CliError::Config(_))));
}

#[test]
fn hash_ignores_formatting() {
    let a = ExperimentManifest::from_toml(PENDULUM).unwrap();
    let reformatted = PENDULUM.replace("horizon = 4.0", "horizon   =   4.0  # seconds");
    assert_eq!(a.hash(), ExperimentManifest::from_toml(&reformatted).unwrap().hash());
    let changed = PENDULUM.replace("horizon = 4.0", "horizon = 5.0");
    assert_ne!(a.hash(), ExperimentManifest::from_toml(&changed).unwrap().hash());
}

#[test]
fn shipped_configs_match_the_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let presets = [
        ("attitude", BenchmarkConfig::attitude(ControllerKind::Cvstem)),
        ("formation", BenchmarkConfig::formation(ControllerKind::Cvstem)),
        ("scalar", BenchmarkConfig::scalar(ControllerKind::Cvstem)),
        ("pendulum", BenchmarkConfig::pendulum(ControllerKind::Cvstem)),
    ];
    for (name, preset) in presets {
        let m = ExperimentManifest::load(&root.join(format!("{name}.toml"))).unwrap();
        assert_eq!(m.config, preset, "{name}");
        assert_eq!(m.n_runs, 60);
    }
}
