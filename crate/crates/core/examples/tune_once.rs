//! Runs one double lane change with the UKF tuner and prints the weight
//! trajectory. `cargo run --release -p xtune-core --example tune_once`

use xtune_core::harness::report;
use xtune_core::{run_closed_loop, ScenarioConfig, TunerKind};

fn main() {
    let mut cfg = ScenarioConfig::default();
    cfg.dlc.repeats = 1;
    cfg.tuner_kind = TunerKind::Ukf;
    let log = run_closed_loop(&cfg).expect("default config is valid");
    println!("{}", report(&log.summary()));
    for u in &log.updates {
        println!(
            "update {} at t={:.2}: {:?} -> {:?}",
            u.index, u.t, u.theta_before, u.theta_after
        );
    }
}
