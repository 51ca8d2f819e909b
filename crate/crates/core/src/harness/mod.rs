//! Closed-loop experiments: configuration, the run itself, output noise,
//! summaries and the files a run leaves behind.

pub mod config;
pub mod noise;
pub mod output;
pub mod run;
pub mod summary;

pub use config::{default_model, default_plant, ConfigError, ScenarioConfig};
pub use noise::inject_measurement_noise;
pub use output::{
    compare_table, plot, read_summary, report, write_run, write_trace, OutputError, CONFIG_FILE,
    SUMMARY_FILE, TRACE_FILE, UPDATES_FILE,
};
pub use run::{run_closed_loop, stream_rng, RunLog, RunMeta, StreamPurpose, TraceRow};
pub use summary::{
    maneuver_peaks, reduction_pct, summarize, window_norms, SummaryReport, WindowMetric,
};
