//! Closed-loop stepping of controller and plant, and the rollouts the tuner
//! runs on freshly randomized plants.

use super::plant::{plant_step, PlantConfig, PlantModel, PlantState};
use super::{ControlInput, DynamicsError, VehicleState};
use crate::nmpc::{ControlOutput, NmpcController, NmpcError, NmpcWeights, SolveStatus};
use crate::path::{PathError, Projector, ReferencePath};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("controller: {0}")]
    Controller(#[from] NmpcError),
    #[error("projection: {0}")]
    Projection(#[from] PathError),
    #[error("plant: {0}")]
    Plant(#[from] DynamicsError),
}

#[derive(Debug, Error)]
#[error("rollout failed at step {step}: {source}")]
pub struct RolloutError {
    pub step: usize,
    pub source: LoopError,
}

/// Fixed context of a closed loop.
#[derive(Debug, Clone, Copy)]
pub struct LoopEnv<'a> {
    pub path: &'a ReferencePath,
    /// Control period [s].
    pub ts: f64,
    /// Plant integration substeps per control period.
    pub substeps: usize,
}

/// Everything that evolves in a closed loop. Cloning it snapshots the loop,
/// including the controller's warm start.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub plant: PlantState,
    /// Input applied over the previous period.
    pub applied: ControlInput,
    pub controller: NmpcController,
    pub projector: Projector,
    pub t: f64,
    pub step: usize,
}

/// One control period: measurement at its start and what was applied.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub plant: PlantState,
    pub measured: VehicleState,
    pub v_ref: f64,
    pub input: ControlInput,
    pub cost: f64,
    pub status: SolveStatus,
    pub sqp_iters: usize,
    pub qp_iters: usize,
    pub solve_time: f64,
    pub fallback: bool,
}

impl StepRecord {
    pub fn v_err(&self) -> f64 {
        self.measured.vx - self.v_ref
    }
}

impl LoopState {
    pub fn measure(&mut self, path: &ReferencePath) -> Result<VehicleState, PathError> {
        let c = self.projector.project(path, &self.plant.pose())?;
        Ok(VehicleState {
            vx: self.plant.vx,
            vy: self.plant.vy,
            r: self.plant.r,
            s: c.s,
            w: c.w,
            theta: c.theta,
        })
    }

    /// Measures, solves, and advances the plant by one control period.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        env: &LoopEnv<'_>,
        model: &PlantModel,
        rng: &mut R,
    ) -> Result<StepRecord, LoopError> {
        let measured = self.measure(env.path)?;
        let out: ControlOutput = self.controller.step(&measured, &self.applied, env.path)?;
        let record = StepRecord {
            t: self.t,
            plant: self.plant,
            measured,
            v_ref: env.path.v_ref_clamped(measured.s),
            input: out.input,
            cost: out.cost,
            status: out.status,
            sqp_iters: out.sqp_iters,
            qp_iters: out.qp_iters,
            solve_time: out.solve_time,
            fallback: out.fallback,
        };
        let dt = env.ts / env.substeps.max(1) as f64;
        for _ in 0..env.substeps.max(1) {
            self.plant = plant_step(&self.plant, &out.input, dt, model, rng)?;
        }
        self.applied = out.input;
        self.t += env.ts;
        self.step += 1;
        Ok(record)
    }
}

/// Signals the performance vector is built from, one entry per period.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerformanceWindow {
    pub v_err: Vec<f64>,
    pub w_dev: Vec<f64>,
    pub j_opt: Vec<f64>,
}

impl PerformanceWindow {
    pub fn push(&mut self, rec: &StepRecord) {
        self.v_err.push(rec.v_err());
        self.w_dev.push(rec.measured.w);
        self.j_opt.push(rec.cost);
    }

    pub fn from_records(recs: &[StepRecord]) -> Self {
        let mut w = Self::default();
        for r in recs {
            w.push(r);
        }
        w
    }

    pub fn len(&self) -> usize {
        self.v_err.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_err.is_empty()
    }
}

/// Runs `steps` periods from `start` with `weights` on a plant drawn from
/// `plant_cfg`. The snapshot itself is not modified.
pub fn xdt_rollout<R: Rng + ?Sized>(
    start: &LoopState,
    weights: &NmpcWeights,
    env: &LoopEnv<'_>,
    plant_cfg: &PlantConfig,
    steps: usize,
    rng: &mut R,
) -> Result<PerformanceWindow, RolloutError> {
    let model = PlantModel::randomized(plant_cfg, rng);
    rollout_on(start, weights, env, &model, steps, rng)
}

/// Same as [`xdt_rollout`] on a given plant realization.
pub fn rollout_on<R: Rng + ?Sized>(
    start: &LoopState,
    weights: &NmpcWeights,
    env: &LoopEnv<'_>,
    model: &PlantModel,
    steps: usize,
    rng: &mut R,
) -> Result<PerformanceWindow, RolloutError> {
    let mut state = start.clone();
    state.controller.set_weights(*weights);
    let mut window = PerformanceWindow::default();
    for step in 0..steps {
        let rec = state
            .step(env, model, rng)
            .map_err(|source| RolloutError { step, source })?;
        if rec.fallback {
            // Rollouts only score controllers that actually solved.
            return Err(RolloutError {
                step,
                source: LoopError::Controller(NmpcError::TooManyFailures(
                    state.controller.consecutive_failures(),
                )),
            });
        }
        window.push(&rec);
    }
    Ok(window)
}
