//! Executes a manifest and writes its results directory.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use cvstem::analysis::BoundReport;
use cvstem::benchmarks::{bound_report, build_experiment, run_benchmark, BenchmarkConfig, BenchmarkError, BenchmarkKind, ControllerKind};
use cvstem::sim::{run_ensemble, trailing_moving_average, TrajectoryRecord};
use serde::Serialize;

use crate::manifest::ExperimentManifest;
use crate::summary::{self, RunRow, SummaryRow, RUNS_FILE};
use crate::CliError;

/// z-score and tolerated soft-violation fraction of the bound comparisons.
pub const BOUND_Z: f64 = 1.96;
pub const BOUND_MAX_VIOLATION: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub seed_base: u64,
}

/// Per-run sidecar written next to the trajectory CSV.
#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: &'a str,
    controller: ControllerKind,
    dt_ctrl: f64,
    seed: u64,
    error: Option<String>,
    solves: usize,
    failed_solves: usize,
    limit_dropped_solves: usize,
    saturated_steps: usize,
    solver_iterations: usize,
}

#[derive(Serialize)]
struct MovingAverage {
    window: usize,
    alignment: &'static str,
}

#[derive(Serialize)]
struct GroupStats {
    controller: ControllerKind,
    dt_ctrl: f64,
    runs: usize,
    failed_runs: usize,
    solves: usize,
    failed_solves: usize,
    bound_passed: Option<bool>,
}

#[derive(Serialize)]
struct ResultsManifest<'a> {
    name: &'a str,
    version: &'static str,
    config_hash: String,
    seed_base: u64,
    n_runs: usize,
    steady_state_window: usize,
    moving_average: MovingAverage,
    failure_fraction: f64,
    groups: Vec<GroupStats>,
    manifest: &'a ExperimentManifest,
}

#[derive(Serialize)]
struct TraceRow {
    t: f64,
    mean_err_sq: f64,
    moving_average: f64,
}

#[derive(Serialize)]
struct BoundRow {
    t: f64,
    empirical: f64,
    std_err: f64,
    bound: f64,
}

pub struct RunOutcome {
    pub summary: Vec<SummaryRow>,
    pub failure_fraction: f64,
}

fn group_name(cfg: &BenchmarkConfig) -> String {
    format!("{}_dtc{}", cfg.controller.as_str(), cfg.dt_ctrl)
}

fn has_bound(cfg: &BenchmarkConfig) -> bool {
    cfg.controller == ControllerKind::Cvstem && matches!(cfg.benchmark, BenchmarkKind::Scalar | BenchmarkKind::Pendulum)
}

fn config_error(e: BenchmarkError) -> CliError {
    match e {
        BenchmarkError::Config(m) => CliError::Config(m),
        other => CliError::Run(other.to_string()),
    }
}

/// Fraction of failed metric solves or failed runs, whichever is larger.
pub fn failure_fraction(rows: &[RunRow]) -> f64 {
    let solves: usize = rows.iter().map(|r| r.solves).sum();
    let failed: usize = rows.iter().map(|r| r.failed_solves).sum();
    let solve_frac = if solves == 0 { 0.0 } else { failed as f64 / solves as f64 };
    let run_frac = rows.iter().filter(|r| !r.ok).count() as f64 / rows.len().max(1) as f64;
    solve_frac.max(run_frac)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_bound(dir: &Path, stem: &str, report: &BoundReport) -> Result<(), CliError> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    let rows: Vec<BoundRow> = (0..report.times.len())
        .map(|k| BoundRow { t: report.times[k], empirical: report.empirical[k], std_err: report.std_err[k], bound: report.bound[k] })
        .collect();
    summary::write_csv(&dir.join(format!("{stem}.csv")), &rows)
}

struct RunResult {
    row: RunRow,
    err_sq: Option<Vec<f64>>,
    times: Option<Vec<f64>>,
    record: Option<TrajectoryRecord>,
}

fn one_run(m: &ExperimentManifest, cfg: &BenchmarkConfig, hash: &str, dir: &Path, seed: u64) -> Result<RunResult, CliError> {
    let outcome = run_benchmark(cfg, seed);
    let mut sidecar = RunManifest {
        config_hash: hash,
        controller: cfg.controller,
        dt_ctrl: cfg.dt_ctrl,
        seed,
        error: None,
        solves: 0,
        failed_solves: 0,
        limit_dropped_solves: 0,
        saturated_steps: 0,
        solver_iterations: 0,
    };
    let result = match outcome {
        Ok(rec) => {
            sidecar.solves = rec.solve_log.iter().filter(|e| e.resolved).count();
            sidecar.failed_solves = rec.solve_log.iter().filter(|e| e.resolved && !e.accepted).count();
            sidecar.limit_dropped_solves = rec.solve_log.iter().filter(|e| e.input_limit_dropped).count();
            sidecar.saturated_steps = rec.diagnostics.iter().filter(|d| d.saturated).count();
            sidecar.solver_iterations = rec.solve_log.iter().map(|e| e.iterations).sum();
            if m.write_trajectories {
                rec.write_csv(File::create(dir.join(format!("seed_{seed}.csv")))?)?;
            }
            let row = RunRow {
                controller: cfg.controller,
                dt_ctrl: cfg.dt_ctrl,
                seed,
                ok: true,
                steady_state_error: Some(rec.steady_state_error(m.steady_state_window)),
                control_effort: Some(rec.control_effort()),
                max_input_norm: Some(rec.max_input_norm()),
                solves: sidecar.solves,
                failed_solves: sidecar.failed_solves,
            };
            let err_sq = Some(rec.error_sq.clone());
            let times = Some(rec.times.clone());
            RunResult { row, err_sq, times, record: has_bound(cfg).then_some(rec) }
        }
        Err(e) => {
            sidecar.error = Some(e.to_string());
            let row = RunRow {
                controller: cfg.controller,
                dt_ctrl: cfg.dt_ctrl,
                seed,
                ok: false,
                steady_state_error: None,
                control_effort: None,
                max_input_norm: None,
                solves: 0,
                failed_solves: 0,
            };
            RunResult { row, err_sq: None, times: None, record: None }
        }
    };
    write_json(&dir.join(format!("seed_{seed}.json")), &sidecar)?;
    Ok(result)
}

/// Mean squared error across successful runs and its trailing moving average.
fn trace(results: &[RunResult], window: usize) -> Vec<TraceRow> {
    let series: Vec<&Vec<f64>> = results.iter().filter_map(|r| r.err_sq.as_ref()).collect();
    let Some(times) = results.iter().find_map(|r| r.times.as_ref()) else {
        return Vec::new();
    };
    let mean: Vec<f64> = (0..times.len()).map(|k| series.iter().map(|s| s[k]).sum::<f64>() / series.len() as f64).collect();
    let smooth = trailing_moving_average(&mean, window);
    (0..times.len()).map(|k| TraceRow { t: times[k], mean_err_sq: mean[k], moving_average: smooth[k] }).collect()
}

/// Runs every (controller, dt_ctrl) group of the manifest and writes
/// `runs.csv`, per-run trajectories and sidecars, mean error traces, bound
/// reports where constants are available, `manifest.json` and the summary
/// files. Fails with [`CliError::SolverFailures`] after writing everything
/// when the failure fraction exceeds the manifest threshold.
pub fn run(m: &ExperimentManifest, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    m.validate()?;
    let configs = m.configs()?;
    for cfg in &configs {
        build_experiment(cfg, opts.seed_base).map_err(config_error)?;
    }
    let hash = m.hash();
    let runs_dir = opts.out.join("runs");
    let traces_dir = opts.out.join("traces");
    let bounds_dir = opts.out.join("bounds");
    for d in [&runs_dir, &traces_dir, &bounds_dir] {
        fs::create_dir_all(d)?;
    }

    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for cfg in &configs {
        let name = group_name(cfg);
        let dir = runs_dir.join(&name);
        fs::create_dir_all(&dir)?;
        let results: Vec<RunResult> =
            run_ensemble(m.n_runs, opts.seed_base, opts.jobs, |seed| one_run(m, cfg, &hash, &dir, seed)).into_iter().collect::<Result<_, _>>()?;
        summary::write_csv(&traces_dir.join(format!("{name}.csv")), &trace(&results, m.moving_average_window))?;

        let mut bound_passed = None;
        if has_bound(cfg) {
            let records: Vec<TrajectoryRecord> = results.iter().filter_map(|r| r.record.clone()).collect();
            if !records.is_empty() {
                let report = bound_report(cfg, &records, BOUND_Z, BOUND_MAX_VIOLATION).map_err(|e| CliError::Run(e.to_string()))?;
                bound_passed = Some(report.passed);
                write_bound(&bounds_dir, &name, &report)?;
            }
        }
        let group_rows: Vec<RunRow> = results.into_iter().map(|r| r.row).collect();
        groups.push(GroupStats {
            controller: cfg.controller,
            dt_ctrl: cfg.dt_ctrl,
            runs: group_rows.len(),
            failed_runs: group_rows.iter().filter(|r| !r.ok).count(),
            solves: group_rows.iter().map(|r| r.solves).sum(),
            failed_solves: group_rows.iter().map(|r| r.failed_solves).sum(),
            bound_passed,
        });
        rows.extend(group_rows);
    }

    summary::write_csv(&opts.out.join(RUNS_FILE), &rows)?;
    let failure_fraction = failure_fraction(&rows);
    let results_manifest = ResultsManifest {
        name: &m.name,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash.clone(),
        seed_base: opts.seed_base,
        n_runs: m.n_runs,
        steady_state_window: m.steady_state_window,
        moving_average: MovingAverage { window: m.moving_average_window, alignment: "trailing" },
        failure_fraction,
        groups,
        manifest: m,
    };
    write_json(&opts.out.join("manifest.json"), &results_manifest)?;
    let summary = summary::summarize(&opts.out)?;
    if failure_fraction > m.failure_threshold {
        return Err(CliError::SolverFailures { fraction: failure_fraction, threshold: m.failure_threshold });
    }
    Ok(RunOutcome { summary, failure_fraction })
}

/// Runs the CV-STEM ensemble of the manifest's base config and compares it
/// with the analytic bound. Writes `bounds/verify.{json,csv}`.
pub fn verify_bounds(m: &ExperimentManifest, opts: &RunOptions) -> Result<BoundReport, CliError> {
    m.validate()?;
    let cfg = BenchmarkConfig { controller: ControllerKind::Cvstem, ..m.config.clone() };
    if !has_bound(&cfg) {
        return Err(CliError::Config(format!("no bound constants for the {:?} benchmark; use scalar or pendulum", cfg.benchmark)));
    }
    build_experiment(&cfg, opts.seed_base).map_err(config_error)?;
    let records = run_ensemble(m.n_runs, opts.seed_base, opts.jobs, |seed| run_benchmark(&cfg, seed))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Run(e.to_string()))?;
    let report = bound_report(&cfg, &records, BOUND_Z, BOUND_MAX_VIOLATION).map_err(|e| CliError::Run(e.to_string()))?;
    let dir = opts.out.join("bounds");
    fs::create_dir_all(&dir)?;
    write_bound(&dir, "verify", &report)?;
    Ok(report)
}
