//! Files a run writes, and the reports built from them.

use super::config::ScenarioConfig;
use super::run::RunLog;
use super::summary::SummaryReport;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRACE_FILE: &str = "trace.csv";
pub const UPDATES_FILE: &str = "updates.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("not a run directory: {0}")]
    NotARun(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn trace_header(p: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "t",
        "X",
        "Y",
        "psi",
        "vx",
        "vy",
        "r",
        "s",
        "w",
        "theta",
        "delta",
        "tr",
        "j_opt",
        "sqp_iters",
        "qp_iters",
        "solve_time",
        "status",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..p).map(|i| format!("theta_{i}")));
    h.push("update_flag".into());
    h
}

pub fn write_trace<W: std::io::Write>(log: &RunLog, out: W) -> Result<(), OutputError> {
    let p = log.rows.first().map_or(0, |r| r.theta_active.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(p))?;
    for r in &log.rows {
        let mut rec: Vec<String> = [
            r.t, r.x, r.y, r.psi, r.vx, r.vy, r.r, r.s, r.w, r.theta, r.delta, r.tr, r.j_opt,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect();
        rec.push(r.sqp_iters.to_string());
        rec.push(r.qp_iters.to_string());
        rec.push(r.solve_time.to_string());
        rec.push(r.status.as_str().to_string());
        rec.extend(r.theta_active.iter().map(|v| v.to_string()));
        rec.push(u8::from(r.update_flag).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| OutputError::Csv(e.into()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes the trace, update records, summary and resolved config into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ScenarioConfig,
    log: &RunLog,
) -> Result<SummaryReport, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let trace = dir.join(TRACE_FILE);
    let file = fs::File::create(&trace).map_err(io_err(&trace))?;
    write_trace(log, std::io::BufWriter::new(file))?;
    write_json(&dir.join(UPDATES_FILE), &log.updates)?;
    let summary = log.summary();
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(io_err(&cfg_path))?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<SummaryReport, OutputError> {
    let path = dir.join(SUMMARY_FILE);
    if !path.is_file() {
        return Err(OutputError::NotARun(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| OutputError::Json { path, source })
}

fn fmt_opt(x: Option<f64>, prec: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"))
}

/// Human-readable summary of one run.
pub fn report(s: &SummaryReport) -> String {
    let mut out = String::new();
    let snr = s.snr_db.map_or("off".to_string(), |v| format!("{v} dB"));
    let _ = writeln!(
        out,
        "tuner {}  seed {}  noise {}",
        s.tuner_kind.as_str(),
        s.seed,
        snr
    );
    let _ = writeln!(
        out,
        "steps {}  updates {}  runtime {:.1} s",
        s.steps, s.updates, s.total_runtime_s
    );
    if let Some(e) = &s.error {
        let _ = writeln!(out, "stopped early: {e}");
    }
    let _ = writeln!(out, "\nwindow  t_start  |v_err|_inf  |w|_inf");
    for w in &s.windows {
        let _ = writeln!(
            out,
            "{:>6}  {:>7.2}  {:>11.4}  {:>7.4}",
            w.index, w.t_start, w.v_err_inf, w.w_inf
        );
    }
    let peaks: Vec<String> = s.maneuver_peaks.iter().map(|p| format!("{p:.4}")).collect();
    let _ = writeln!(out, "\nmaneuver peaks |w|: {}", peaks.join(" "));
    let _ = writeln!(
        out,
        "reductions: velocity {:.1}%  path {:.1}%  maneuver peak {:.1}%",
        s.velocity_reduction_pct, s.path_reduction_pct, s.maneuver_reduction_pct
    );
    let theta: Vec<String> = s.final_theta.iter().map(|t| format!("{t:.3}")).collect();
    let _ = writeln!(out, "final theta: [{}]", theta.join(", "));
    out
}

/// One row per run: first and last window errors, peak path error and the
/// final weights.
pub fn compare_table(runs: &[(String, SummaryReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}  final theta",
        "tuner", "noise", "v_first", "v_last", "w_first", "w_last", "peak_1st", "peak_end"
    );
    for (_, s) in runs {
        let f = s.first_window();
        let l = s.last_window();
        let theta: Vec<String> = s.final_theta.iter().map(|t| format!("{t:.2}")).collect();
        let _ = writeln!(
            out,
            "{:<10} {:<8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}  [{}]",
            s.tuner_kind.as_str(),
            s.snr_db.map_or("off".to_string(), |v| format!("{v}dB")),
            fmt_opt(f.map(|w| w.v_err_inf), 4),
            fmt_opt(l.map(|w| w.v_err_inf), 4),
            fmt_opt(f.map(|w| w.w_inf), 4),
            fmt_opt(l.map(|w| w.w_inf), 4),
            fmt_opt(s.maneuver_peaks.first().copied(), 4),
            fmt_opt(s.maneuver_peaks.last().copied(), 4),
            theta.join(", ")
        );
    }
    out
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
# Plots a run directory: tracking errors, tuned weights and window norms.
import csv
import json
import os
import sys

import matplotlib.pyplot as plt

run = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(run, "trace.csv")) as f:
    rows = list(csv.DictReader(f))
with open(os.path.join(run, "summary.json")) as f:
    summary = json.load(f)

t = [float(r["t"]) for r in rows]
thetas = sorted(k for k in rows[0] if k.startswith("theta_"))
upd = [float(r["t"]) for r in rows if r["update_flag"] == "1"]

fig, ax = plt.subplots(4, 1, sharex=True, figsize=(9, 10))
ax[0].plot([float(r["X"]) for r in rows], [float(r["Y"]) for r in rows])
ax[0].set_ylabel("Y [m] over X")
ax[1].plot(t, [float(r["w"]) for r in rows])
ax[1].set_ylabel("w [m]")
ax[2].plot(t, [float(r["vx"]) for r in rows])
ax[2].set_ylabel("vx [m/s]")
for k in thetas:
    ax[3].plot(t, [float(r[k]) for r in rows], label=k)
ax[3].scatter(upd, [0.0] * len(upd), color="green", s=10, label="update")
ax[3].set_ylabel("weights")
ax[3].set_xlabel("t [s]")
ax[3].legend()
fig.tight_layout()
fig.savefig(os.path.join(run, "trace.png"), dpi=120)

w = summary["windows"]
fig2, ax2 = plt.subplots(2, 1, sharex=True)
ax2[0].bar([x["index"] for x in w], [x["v_err_inf"] for x in w])
ax2[0].set_ylabel("|v_err| inf [m/s]")
ax2[1].bar([x["index"] for x in w], [x["w_inf"] for x in w])
ax2[1].set_ylabel("|w| inf [m]")
ax2[1].set_xlabel("window")
fig2.tight_layout()
fig2.savefig(os.path.join(run, "windows.png"), dpi=120)
"#;

/// Writes per-window data and a plotting script next to the run's files.
/// Nothing is rendered here.
pub fn plot(dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let summary = read_summary(dir)?;
    if !dir.join(TRACE_FILE).is_file() {
        return Err(OutputError::NotARun(dir.to_path_buf()));
    }
    let windows = dir.join("windows.csv");
    let mut w = csv::Writer::from_path(&windows)?;
    w.write_record(["index", "t_start", "v_err_inf", "w_inf"])?;
    for m in &summary.windows {
        w.write_record([
            m.index.to_string(),
            m.t_start.to_string(),
            m.v_err_inf.to_string(),
            m.w_inf.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&windows))?;
    let script = dir.join("plot.py");
    fs::write(&script, PLOT_SCRIPT).map_err(io_err(&script))?;
    Ok(vec![windows, script])
}
