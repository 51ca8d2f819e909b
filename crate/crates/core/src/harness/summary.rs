//! Window and maneuver metrics of a finished run.

use super::run::RunLog;
use crate::tuner::TunerKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMetric {
    pub index: usize,
    pub t_start: f64,
    /// `max |vx − v_ref|` over the window [m/s].
    pub v_err_inf: f64,
    /// `max |w|` over the window [m].
    pub w_inf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub tuner_kind: TunerKind,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub completed: bool,
    pub error: Option<String>,
    pub steps: usize,
    pub updates: usize,
    /// Complete windows only; a trailing partial window is left out.
    pub windows: Vec<WindowMetric>,
    /// Peak `|w|` per lane-change maneuver [m].
    pub maneuver_peaks: Vec<f64>,
    pub velocity_reduction_pct: f64,
    pub path_reduction_pct: f64,
    pub maneuver_reduction_pct: f64,
    pub final_theta: Vec<f64>,
    pub total_runtime_s: f64,
}

impl SummaryReport {
    pub fn first_window(&self) -> Option<&WindowMetric> {
        self.windows.first()
    }

    pub fn last_window(&self) -> Option<&WindowMetric> {
        self.windows.last()
    }
}

/// `100·(1 − last/first)`; 0 when there is nothing to reduce.
pub fn reduction_pct(first: f64, last: f64) -> f64 {
    if first > 0.0 {
        100.0 * (1.0 - last / first)
    } else {
        0.0
    }
}

fn inf_norm(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// ∞-norms over consecutive complete windows of `n` samples.
pub fn window_norms(v_err: &[f64], w: &[f64], n: usize, ts: f64) -> Vec<WindowMetric> {
    assert_eq!(v_err.len(), w.len());
    if n == 0 {
        return Vec::new();
    }
    (0..v_err.len() / n)
        .map(|k| {
            let r = k * n..(k + 1) * n;
            WindowMetric {
                index: k,
                t_start: (k * n) as f64 * ts,
                v_err_inf: inf_norm(v_err[r.clone()].iter().copied()),
                w_inf: inf_norm(w[r].iter().copied()),
            }
        })
        .collect()
}

/// Peak `|w|` of the samples falling into each maneuver, by arc length.
/// Maneuvers that were never reached are left out.
pub fn maneuver_peaks(s: &[f64], w: &[f64], start: f64, length: f64, count: usize) -> Vec<f64> {
    let mut peaks = vec![None::<f64>; count];
    for (&si, &wi) in s.iter().zip(w) {
        let k = ((si - start) / length).floor();
        if k >= 0.0 && (k as usize) < count {
            let p = peaks[k as usize].get_or_insert(0.0);
            *p = p.max(wi.abs());
        }
    }
    peaks.into_iter().map_while(|p| p).collect()
}

pub fn summarize(log: &RunLog) -> SummaryReport {
    let m = &log.meta;
    let v_err: Vec<f64> = log.rows.iter().map(|r| r.v_err()).collect();
    let w: Vec<f64> = log.rows.iter().map(|r| r.w).collect();
    let s: Vec<f64> = log.rows.iter().map(|r| r.s).collect();
    let windows = window_norms(&v_err, &w, m.window_len, m.ts);
    let peaks = maneuver_peaks(&s, &w, m.path_start, m.maneuver_length, m.maneuvers);
    let ends = |f: fn(&WindowMetric) -> f64| match (windows.first(), windows.last()) {
        (Some(a), Some(b)) => reduction_pct(f(a), f(b)),
        _ => 0.0,
    };
    SummaryReport {
        tuner_kind: m.tuner_kind,
        seed: m.seed,
        snr_db: m.snr_db,
        completed: log.completed(),
        error: log.error.clone(),
        steps: log.rows.len(),
        updates: log.updates.len(),
        velocity_reduction_pct: ends(|w| w.v_err_inf),
        path_reduction_pct: ends(|w| w.w_inf),
        maneuver_reduction_pct: match (peaks.first(), peaks.last()) {
            (Some(&a), Some(&b)) => reduction_pct(a, b),
            _ => 0.0,
        },
        windows,
        maneuver_peaks: peaks,
        final_theta: log
            .rows
            .last()
            .map(|r| r.theta_active.clone())
            .unwrap_or_default(),
        total_runtime_s: log.runtime_s,
    }
}
