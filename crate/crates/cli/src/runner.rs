//! Sweep execution and CSV output.
//!
//! Each run writes `run_NNNN.csv` with one row per slot:
//!
//! | column | meaning |
//! |---|---|
//! | `slot` | slot index |
//! | `backlog_before` | backlog at slot start plus arrivals |
//! | `queue` | backlog after the update |
//! | `arrivals`, `services`, `completed`, `dropped`, `waiting` | request counts |
//! | `y0` | node-wide consumed fraction |
//! | `reallocation` | 1 if the slot triggered a reallocation |
//! | `refreshed` | devices whose view was refreshed |
//! | `<device>_<kind>` | allocated fraction per device and kind |
//! | `z_<device>`, `y_<device>` | virtual queue and its increment |
//!
//! `summary.csv` has one row per run: `run`, the swept parameters, `seed`,
//! `arrivals`, `completed`, `dropped`, `avg_latency_s`, `avg_queue`,
//! `tail_violation`, `reallocations`, `avg_y0`, then `<device>_<kind>` mean
//! utilization. Numbers use Rust's shortest round-trip formatting, which
//! does not depend on locale.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use edgeprov_core::sim::{self, Metrics, SimConfig};
use rayon::prelude::*;

use crate::config::{format_value, ConfigError, ExperimentSpec, RunPlan};

pub const KINDS: [&str; 4] = ["processing", "storage", "memory", "networking"];
pub const THREADS_ENV: &str = "EDGEPROV_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{run} failed: {message}")]
    Run { run: String, message: String },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("bad {THREADS_ENV} value `{0}`")]
    Threads(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        for row in &self.rows {
            out += &line(row);
        }
        out
    }
}

/// Thread cap from the environment, if set.
pub fn threads_from_env() -> Result<Option<usize>, RunError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(RunError::Threads(s)),
        },
    }
}

/// Runs every point of the sweep, writes the CSVs under `spec.out` and
/// returns the summary rows in run order.
pub fn run_experiments(spec: &ExperimentSpec, threads: Option<usize>) -> Result<Report, RunError> {
    let plans = spec.plans()?;
    let out = &spec.out;
    fs::create_dir_all(out).map_err(|e| output_error(out, e))?;
    let device_names = names(&spec.base);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    let results: Vec<Result<Vec<String>, RunError>> =
        pool.install(|| plans.par_iter().map(|plan| execute(plan, out, &device_names)).collect());

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let mut header = vec!["run".to_string()];
    header.extend(spec.sweep.iter().map(|a| a.name.clone()));
    header.extend(
        ["seed", "arrivals", "completed", "dropped", "avg_latency_s", "avg_queue", "tail_violation", "reallocations", "avg_y0"]
            .map(String::from),
    );
    header.extend(kind_columns(&device_names));
    let report = Report { header, rows };
    let path = out.join("summary.csv");
    write_csv(&path, &report.header, &report.rows)?;
    Ok(report)
}

fn execute(plan: &RunPlan, out: &Path, device_names: &[String]) -> Result<Vec<String>, RunError> {
    let config = plan.config.clone();
    let metrics = guarded(plan, || sim::run(config))?;
    let (header, rows) = slot_table(&metrics, device_names);
    write_csv(&out.join(format!("run_{:04}.csv", plan.index)), &header, &rows)?;

    let s = &metrics.summary;
    let mut row = vec![plan.index.to_string()];
    row.extend(plan.params.iter().map(|(_, v)| format_value(v)));
    row.extend([
        plan.seed.to_string(),
        s.arrivals.to_string(),
        s.completed.to_string(),
        s.dropped.to_string(),
        s.avg_latency_s.to_string(),
        s.avg_queue.to_string(),
        s.tail_violation.to_string(),
        s.reallocations.to_string(),
        s.avg_y0.to_string(),
    ]);
    row.extend(s.utilization.iter().flat_map(|u| u.iter().map(f64::to_string)));
    Ok(row)
}

/// Runs `f`, turning an error or a panic into a failure naming the run.
fn guarded(plan: &RunPlan, f: impl FnOnce() -> edgeprov_core::Result<Metrics>) -> Result<Metrics, RunError> {
    let fail = |message: String| RunError::Run {
        run: plan.to_string(),
        message,
    };
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(m)) => Ok(m),
        Ok(Err(e)) => Err(fail(e.to_string())),
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(fail(message))
        }
    }
}

fn names(config: &SimConfig) -> Vec<String> {
    config.devices.iter().map(|d| d.name.clone()).collect()
}

fn kind_columns(devices: &[String]) -> Vec<String> {
    devices
        .iter()
        .flat_map(|d| KINDS.iter().map(move |k| format!("{d}_{k}")))
        .collect()
}

fn slot_table(m: &Metrics, devices: &[String]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = [
        "slot",
        "backlog_before",
        "queue",
        "arrivals",
        "services",
        "completed",
        "dropped",
        "waiting",
        "y0",
        "reallocation",
        "refreshed",
    ]
    .map(String::from)
    .to_vec();
    header.extend(kind_columns(devices));
    header.extend(devices.iter().map(|d| format!("z_{d}")));
    header.extend(devices.iter().map(|d| format!("y_{d}")));

    let rows = m
        .slots
        .iter()
        .map(|s| {
            let mut row = vec![
                s.slot.to_string(),
                s.backlog_before.to_string(),
                s.queue.to_string(),
                s.arrivals.to_string(),
                s.services.to_string(),
                s.completed.to_string(),
                s.dropped.to_string(),
                s.waiting.to_string(),
                s.y0.to_string(),
                u8::from(s.reallocation).to_string(),
                s.refreshed.to_string(),
            ];
            row.extend(s.utilization.iter().flat_map(|u| u.iter().map(f64::to_string)));
            row.extend(s.z.iter().map(f64::to_string));
            row.extend(s.y.iter().map(f64::to_string));
            row
        })
        .collect();
    (header, rows)
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), RunError> {
    let io = |e: csv::Error| RunError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

fn output_error(path: &Path, e: std::io::Error) -> RunError {
    RunError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
