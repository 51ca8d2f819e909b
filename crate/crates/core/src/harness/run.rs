//! The closed-loop experiment: real plant, controller, and periodic tuner
//! updates computed on the surrogate plant.

use super::config::{ConfigError, ScenarioConfig};
use super::noise::inject_measurement_noise;
use super::summary::{summarize, SummaryReport};
use crate::dynamics::{
    xdt_rollout, ControlInput, LoopEnv, LoopState, PerformanceWindow, PlantModel, PlantState,
    StepRecord,
};
use crate::nmpc::{NmpcController, NmpcWeights, SolveStatus};
use crate::path::{build_dlc_path, Projector, ReferencePath};
use crate::tuner::{
    performance_metric, post_deployment_check, EnergySample, Tuner, TunerKind, UpdateRecord,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Independent random streams, keyed by purpose, update and rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    RealPlantDraw = 1,
    RealPlantNoise = 2,
    Rollout = 3,
    SpsaPerturbation = 4,
    MeasurementNoise = 5,
}

pub fn stream_rng(seed: u64, purpose: StreamPurpose, update: usize, rollout: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 48)
        | ((update as u64 & 0xffff_ffff) << 16)
        | (rollout as u64 & 0xffff);
    rng.set_stream(id);
    rng
}

/// One control period as written to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub s: f64,
    pub w: f64,
    pub theta: f64,
    pub delta: f64,
    pub tr: f64,
    pub v_ref: f64,
    pub j_opt: f64,
    pub sqp_iters: usize,
    pub qp_iters: usize,
    pub solve_time: f64,
    pub status: SolveStatus,
    /// Tuned weights in force during this period.
    pub theta_active: Vec<f64>,
    /// An update was computed at the end of this period.
    pub update_flag: bool,
}

impl TraceRow {
    fn new(rec: &StepRecord, theta: &DVector<f64>) -> Self {
        Self {
            t: rec.t,
            x: rec.plant.x,
            y: rec.plant.y,
            psi: rec.plant.psi,
            vx: rec.plant.vx,
            vy: rec.plant.vy,
            r: rec.plant.r,
            s: rec.measured.s,
            w: rec.measured.w,
            theta: rec.measured.theta,
            delta: rec.input.delta,
            tr: rec.input.tr,
            v_ref: rec.v_ref,
            j_opt: rec.cost,
            sqp_iters: rec.sqp_iters,
            qp_iters: rec.qp_iters,
            solve_time: rec.solve_time,
            status: rec.status,
            theta_active: theta.iter().copied().collect(),
            update_flag: false,
        }
    }

    pub fn v_err(&self) -> f64 {
        self.vx - self.v_ref
    }
}

/// Fixed facts about a run that the summary needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tuner_kind: TunerKind,
    pub seed: u64,
    pub ts: f64,
    pub window_len: usize,
    pub path_start: f64,
    pub maneuver_length: f64,
    pub maneuvers: usize,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub meta: RunMeta,
    pub rows: Vec<TraceRow>,
    pub updates: Vec<UpdateRecord>,
    /// Why the run stopped early, if it did.
    pub error: Option<String>,
    pub runtime_s: f64,
}

impl RunLog {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }

    pub fn summary(&self) -> SummaryReport {
        summarize(self)
    }
}

fn energy_sample(rec: &StepRecord, prev: &ControlInput, ts: f64) -> EnergySample {
    let m = &rec.measured;
    [
        rec.v_err(),
        m.vy,
        m.r,
        0.0,
        m.w,
        m.theta,
        rec.input.delta,
        rec.input.tr,
        (rec.input.delta - prev.delta) / ts,
        (rec.input.tr - prev.tr) / ts,
    ]
}

fn weights_with(base: &NmpcWeights, slots: &[usize], theta: &DVector<f64>) -> NmpcWeights {
    let mut all = base.to_vec();
    for (i, &s) in slots.iter().enumerate() {
        all[s] = theta[i];
    }
    NmpcWeights::from_slice(&all).expect("slot count matches")
}

/// Arc length after which the run stops: one horizon of travel plus a
/// margin before the path end.
fn stop_distance(cfg: &ScenarioConfig, path: &ReferencePath) -> f64 {
    let lookahead = cfg.dlc.entry_speed * cfg.nmpc.horizon as f64 * cfg.nmpc.ts;
    path.total_length() - lookahead - cfg.end_margin
}

/// Drives the scenario to the end of the path. Setup problems are errors;
/// failures while driving end the run early and are recorded in the log.
pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<RunLog, ConfigError> {
    cfg.validate()?;
    let wall = Instant::now();
    let path = build_dlc_path(&cfg.dlc, cfg.path_spacing)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let n = cfg.window_len();
    let ts = cfg.nmpc.ts;
    let env = LoopEnv {
        path: &path,
        ts,
        substeps: cfg.plant_substeps,
    };
    let slots = cfg.tuner.slots.clone();

    let controller = NmpcController::new(cfg.initial_weights, cfg.nmpc.clone(), cfg.model)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut tuner = Tuner::new(cfg.tuner_kind, cfg.tuner.clone(), &cfg.initial_weights, n)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let real = PlantModel::randomized(
        &cfg.plant,
        &mut stream_rng(cfg.seed, StreamPurpose::RealPlantDraw, 0, 0),
    );
    let mut noise_rng = stream_rng(cfg.seed, StreamPurpose::RealPlantNoise, 0, 0);
    let p0 = path.points()[0];
    let mut state = LoopState {
        plant: PlantState {
            x: p0.x,
            y: p0.y,
            psi: p0.psi,
            vx: cfg.dlc.entry_speed,
            ..Default::default()
        },
        applied: ControlInput::default(),
        controller,
        projector: Projector::new(cfg.corridor),
        t: 0.0,
        step: 0,
    };
    state
        .controller
        .set_weights(weights_with(&cfg.initial_weights, &slots, tuner.theta()));

    let meta = RunMeta {
        tuner_kind: cfg.tuner_kind,
        seed: cfg.seed,
        ts,
        window_len: n,
        path_start: path.start_s(),
        maneuver_length: cfg.dlc.maneuver_length(),
        maneuvers: cfg.dlc.repeats,
        snr_db: cfg.snr_db,
    };
    let mut log = RunLog {
        meta,
        rows: Vec::new(),
        updates: Vec::new(),
        error: None,
        runtime_s: 0.0,
    };

    let s_stop = stop_distance(cfg, &path);
    // Generous cap in case the vehicle stalls.
    let max_steps = (4.0 * path.total_length() / (cfg.dlc.entry_speed * ts)).ceil() as usize;
    let mut snapshot = state.clone();
    let mut window_recs: Vec<StepRecord> = Vec::with_capacity(n);
    let mut window_energy: Vec<EnergySample> = Vec::with_capacity(n);
    // Samples of the window preceding the latest update, and those since.
    let mut pending: Option<(usize, Vec<EnergySample>)> = None;

    loop {
        if state.step >= max_steps {
            log.error = Some(format!("no progress: stopped after {max_steps} steps"));
            break;
        }
        let prev = state.applied;
        let rec = match state.step(&env, &real, &mut noise_rng) {
            Ok(r) => r,
            Err(e) => {
                log.error = Some(format!("step {}: {e}", state.step));
                break;
            }
        };
        let sample = energy_sample(&rec, &prev, ts);
        log.rows.push(TraceRow::new(&rec, tuner.theta()));
        window_recs.push(rec.clone());
        window_energy.push(sample);
        let done = rec.measured.s >= s_stop;

        if window_recs.len() == n {
            if let Some((idx, before)) = pending.take() {
                let theta = DVector::from_vec(log.updates[idx].theta_after.clone());
                log.updates[idx].post_deployment = Some(post_deployment_check(
                    &theta,
                    &slots,
                    &before,
                    &window_energy,
                    cfg.tuner.energy_floor,
                ));
            }
            if cfg.tuner_kind != TunerKind::None && !done {
                match tuner_update(
                    cfg,
                    &env,
                    &mut tuner,
                    &snapshot,
                    &window_recs,
                    &window_energy,
                    rec.t + ts,
                ) {
                    Ok(record) => {
                        if record.deployed {
                            let w = weights_with(state.controller.weights(), &slots, tuner.theta());
                            state.controller.set_weights(w);
                        }
                        log.rows.last_mut().expect("row pushed").update_flag = true;
                        pending = Some((log.updates.len(), window_energy.clone()));
                        log.updates.push(record);
                    }
                    Err(e) => {
                        log.error = Some(format!("tuner update {}: {e}", tuner.updates()));
                        break;
                    }
                }
            }
            window_recs.clear();
            window_energy.clear();
            snapshot = state.clone();
        }
        if done {
            break;
        }
    }
    if let Some((idx, before)) = pending.take() {
        let theta = DVector::from_vec(log.updates[idx].theta_after.clone());
        log.updates[idx].post_deployment = Some(post_deployment_check(
            &theta,
            &slots,
            &before,
            &window_energy,
            cfg.tuner.energy_floor,
        ));
    }
    log.runtime_s = wall.elapsed().as_secs_f64();
    Ok(log)
}

fn tuner_update(
    cfg: &ScenarioConfig,
    env: &LoopEnv<'_>,
    tuner: &mut Tuner,
    snapshot: &LoopState,
    recs: &[StepRecord],
    energy: &[EnergySample],
    t: f64,
) -> Result<UpdateRecord, String> {
    let n = recs.len();
    let k = tuner.updates();
    let j_threshold = cfg.tuner.j_threshold;
    let window = PerformanceWindow::from_records(recs);
    let mut h = performance_metric(&window, n, j_threshold).map_err(|e| e.to_string())?;
    if let Some(snr) = cfg.snr_db {
        let mut rng = stream_rng(cfg.seed, StreamPurpose::MeasurementNoise, k, 0);
        h = inject_measurement_noise(&h, 3, snr, &mut rng);
    }
    let base = *snapshot.controller.weights();
    let slots = &cfg.tuner.slots;
    let rollout = |stream: usize, theta: &DVector<f64>| {
        let weights = weights_with(&base, slots, theta);
        let mut rng = stream_rng(cfg.seed, StreamPurpose::Rollout, k, stream);
        let w = xdt_rollout(snapshot, &weights, env, &cfg.plant, n, &mut rng).ok()?;
        performance_metric(&w, n, j_threshold).ok()
    };
    let mut rng = stream_rng(cfg.seed, StreamPurpose::SpsaPerturbation, k, 0);
    tuner
        .update(t, &h, energy, rollout, &mut rng)
        .map_err(|e| e.to_string())
}
