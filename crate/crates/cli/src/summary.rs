//! Per-run rows and the aggregated tables derived from them.

use std::fs::File;
use std::path::Path;

use cvstem::benchmarks::ControllerKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const TREND_FILE: &str = "trend.json";

/// Outcome of one run. Metric fields are empty when the run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub controller: ControllerKind,
    pub dt_ctrl: f64,
    pub seed: u64,
    pub ok: bool,
    pub steady_state_error: Option<f64>,
    pub control_effort: Option<f64>,
    pub max_input_norm: Option<f64>,
    pub solves: usize,
    pub failed_solves: usize,
}

/// One (controller, dt_ctrl) group, normalized against the reference group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: ControllerKind,
    pub dt_ctrl: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub steady_state_error_mean: f64,
    pub steady_state_error_std: f64,
    pub control_effort_mean: f64,
    pub control_effort_std: f64,
    pub normalized_steady_state_error: f64,
    pub normalized_control_effort: f64,
    pub solves: usize,
    pub failed_solves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub controller: ControllerKind,
    pub dt_ctrl: f64,
    pub normalized_steady_state_error: f64,
    pub normalized_control_effort: f64,
}

/// How each controller's normalized error moves along the `dt_ctrl` sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub controller: ControllerKind,
    pub dt_ctrl: Vec<f64>,
    pub normalized_steady_state_error: Vec<f64>,
    /// Error never decreases as the period grows.
    pub nondecreasing: bool,
    /// Ratio of the error at the longest period to the shortest.
    pub end_to_start_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub reference: String,
    pub trends: Vec<Trend>,
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by controller (canonical order) and period (ascending) and
/// normalizes by the CV-STEM group at the shortest period, or by the first
/// group when CV-STEM did not run.
pub fn aggregate(rows: &[RunRow]) -> Result<Vec<SummaryRow>, CliError> {
    let mut keys: Vec<(ControllerKind, f64)> = rows.iter().map(|r| (r.controller, r.dt_ctrl)).collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.dedup();
    if keys.is_empty() {
        return Err(CliError::NoData("no runs recorded".into()));
    }
    let mut out = Vec::with_capacity(keys.len());
    for (controller, dt_ctrl) in keys {
        let group: Vec<&RunRow> = rows.iter().filter(|r| r.controller == controller && r.dt_ctrl == dt_ctrl).collect();
        let ok: Vec<&&RunRow> = group.iter().filter(|r| r.ok).collect();
        let ss: Vec<f64> = ok.iter().filter_map(|r| r.steady_state_error).collect();
        let eff: Vec<f64> = ok.iter().filter_map(|r| r.control_effort).collect();
        let (ss_mean, ss_std) = if ss.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&ss) };
        let (eff_mean, eff_std) = if eff.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&eff) };
        out.push(SummaryRow {
            controller,
            dt_ctrl,
            runs: group.len(),
            failed_runs: group.len() - ok.len(),
            steady_state_error_mean: ss_mean,
            steady_state_error_std: ss_std,
            control_effort_mean: eff_mean,
            control_effort_std: eff_std,
            normalized_steady_state_error: f64::NAN,
            normalized_control_effort: f64::NAN,
            solves: group.iter().map(|r| r.solves).sum(),
            failed_solves: group.iter().map(|r| r.failed_solves).sum(),
        });
    }
    let reference = out.iter().position(|r| r.controller == ControllerKind::Cvstem).unwrap_or(0);
    let (ss_ref, eff_ref) = (out[reference].steady_state_error_mean, out[reference].control_effort_mean);
    for r in &mut out {
        r.normalized_steady_state_error = r.steady_state_error_mean / ss_ref;
        r.normalized_control_effort = r.control_effort_mean / eff_ref;
    }
    Ok(out)
}

pub fn trends(summary: &[SummaryRow]) -> TrendReport {
    let reference = summary
        .iter()
        .find(|r| r.controller == ControllerKind::Cvstem)
        .or(summary.first())
        .map(|r| format!("{} at dt_ctrl = {}", r.controller.as_str(), r.dt_ctrl))
        .unwrap_or_default();
    let mut controllers: Vec<ControllerKind> = summary.iter().map(|r| r.controller).collect();
    controllers.dedup();
    let trends = controllers
        .into_iter()
        .map(|controller| {
            let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.controller == controller).collect();
            let err: Vec<f64> = rows.iter().map(|r| r.normalized_steady_state_error).collect();
            Trend {
                controller,
                dt_ctrl: rows.iter().map(|r| r.dt_ctrl).collect(),
                nondecreasing: err.windows(2).all(|w| w[1] >= w[0]),
                end_to_start_ratio: err[err.len() - 1] / err[0],
                normalized_steady_state_error: err,
            }
        })
        .collect();
    TrendReport { reference, trends }
}

pub fn read_runs(dir: &Path) -> Result<Vec<RunRow>, CliError> {
    let path = dir.join(RUNS_FILE);
    if !path.exists() {
        return Err(CliError::NoData(format!("{} not found", path.display())));
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let rows = rdr.deserialize().collect::<Result<Vec<RunRow>, _>>()?;
    if rows.is_empty() {
        return Err(CliError::NoData(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `runs.csv` in `dir` and writes the summary table, plot data and trend report next to it.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let rows = read_runs(dir)?;
    let summary = aggregate(&rows)?;
    write_csv(&dir.join(SUMMARY_FILE), &summary)?;
    let plot: Vec<PlotRow> = summary
        .iter()
        .map(|r| PlotRow {
            controller: r.controller,
            dt_ctrl: r.dt_ctrl,
            normalized_steady_state_error: r.normalized_steady_state_error,
            normalized_control_effort: r.normalized_control_effort,
        })
        .collect();
    write_csv(&dir.join(PLOT_FILE), &plot)?;
    std::fs::write(dir.join(TREND_FILE), serde_json::to_string_pretty(&trends(&summary))?)?;
    Ok(summary)
}
