use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use xtune_core::harness::{self, ScenarioConfig};
use xtune_core::TunerKind;

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

#[derive(Parser)]
#[command(
    name = "xtune",
    version,
    about = "Path-following NMPC with online weight tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the scenario and write trace.csv, updates.json and summary.json.
    Run {
        /// Scenario file; built-in defaults when left out.
        #[arg(long)]
        config: Option<PathBuf>,
        /// none, ukf, spsa or ukf_spsa.
        #[arg(long, value_parser = parse_kind)]
        tuner: Option<TunerKind>,
        #[arg(long, env = "XTUNE_SEED")]
        seed: Option<u64>,
        /// Output noise on the performance vector [dB].
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary of a run directory.
    Report { run_dir: PathBuf },
    /// Tabulate several runs side by side.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Write plot data and a plotting script into a run directory.
    Plot { run_dir: PathBuf },
}

fn parse_kind(s: &str) -> Result<TunerKind, String> {
    TunerKind::parse(s).ok_or_else(|| format!("unknown tuner '{s}' (none, ukf, spsa, ukf_spsa)"))
}

struct Failure {
    code: u8,
    message: String,
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: CONFIG_ERROR,
        message: e.to_string(),
    }
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: RUNTIME_ERROR,
        message: e.to_string(),
    }
}

fn run(
    config: Option<&Path>,
    tuner: Option<TunerKind>,
    seed: Option<u64>,
    snr_db: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => ScenarioConfig::from_file(p).map_err(config_err)?,
        None => ScenarioConfig::default(),
    };
    if let Some(k) = tuner {
        cfg.tuner_kind = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if snr_db.is_some() {
        cfg.snr_db = snr_db;
    }
    cfg.validate().map_err(config_err)?;
    let log = harness::run_closed_loop(&cfg).map_err(config_err)?;
    let summary = harness::write_run(out, &cfg, &log).map_err(runtime_err)?;
    print!("{}", harness::report(&summary));
    match &log.error {
        Some(e) => Err(runtime_err(format!("run stopped early: {e}"))),
        None => Ok(()),
    }
}

fn read(dir: &Path) -> Result<harness::SummaryReport, Failure> {
    harness::read_summary(dir).map_err(config_err)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            tuner,
            seed,
            snr_db,
            out,
        } => run(config.as_deref(), tuner, seed, snr_db, &out),
        Command::Report { run_dir } => {
            print!("{}", harness::report(&read(&run_dir)?));
            Ok(())
        }
        Command::Compare { run_dirs } => {
            let runs = run_dirs
                .iter()
                .map(|d| Ok((d.display().to_string(), read(d)?)))
                .collect::<Result<Vec<_>, Failure>>()?;
            print!("{}", harness::compare_table(&runs));
            Ok(())
        }
        Command::Plot { run_dir } => {
            read(&run_dir)?;
            for f in harness::plot(&run_dir).map_err(runtime_err)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
