//! Receding-horizon wrapper around the SQP solver.

use super::sqp::{solve_sqp, OcpInstance, OcpSolution, SolveStatus, WarmStart};
use super::{augment, NmpcWeights, OcpConfig};
use crate::dynamics::{ControlInput, SingleTrackParams, VehicleState};
use crate::path::ReferencePath;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmpcError {
    #[error("{0} consecutive solver failures")]
    TooManyFailures(usize),
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

/// Result of one controller call.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub input: ControlInput,
    pub status: SolveStatus,
    /// `J*`, NaN when the solve failed.
    pub cost: f64,
    pub sqp_iters: usize,
    pub qp_iters: usize,
    /// Wall-clock solve time [s].
    pub solve_time: f64,
    /// The previous input was reused because the solve failed.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct NmpcController {
    weights: NmpcWeights,
    cfg: OcpConfig,
    model: SingleTrackParams,
    warm: Option<WarmStart>,
    consecutive_failures: usize,
    max_failures: usize,
}

impl NmpcController {
    pub fn new(
        weights: NmpcWeights,
        cfg: OcpConfig,
        model: SingleTrackParams,
    ) -> Result<Self, NmpcError> {
        cfg.validate().map_err(NmpcError::Config)?;
        model
            .validate()
            .map_err(|e| NmpcError::Config(e.to_string()))?;
        if !weights.is_valid() {
            return Err(NmpcError::Config(
                "weights must be finite, q ≥ 0, r and s > 0".into(),
            ));
        }
        Ok(Self {
            weights,
            cfg,
            model,
            warm: None,
            consecutive_failures: 0,
            max_failures: 5,
        })
    }

    pub fn weights(&self) -> &NmpcWeights {
        &self.weights
    }

    pub fn set_weights(&mut self, w: NmpcWeights) {
        self.weights = w;
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SingleTrackParams {
        &self.model
    }

    pub fn consecutive_failures(&self) -> usize {
        self.consecutive_failures
    }

    /// Drops the warm start and failure count.
    pub fn reset(&mut self) {
        self.warm = None;
        self.consecutive_failures = 0;
    }

    /// Reference speeds along the predicted arc length.
    fn reference(&self, x: &VehicleState, path: &ReferencePath) -> Vec<f64> {
        let v = x.vx.max(0.0);
        (0..=self.cfg.horizon)
            .map(|k| path.v_ref_clamped(x.s + k as f64 * self.cfg.ts * v))
            .collect()
    }

    /// Solves from the measured state and the input applied last interval.
    /// A failed solve reuses `u_prev`; too many in a row is an error.
    pub fn step(
        &mut self,
        x: &VehicleState,
        u_prev: &ControlInput,
        path: &ReferencePath,
    ) -> Result<ControlOutput, NmpcError> {
        let u_prev = self.cfg.clip_input(u_prev);
        let v_ref = self.reference(x, path);
        let inst = OcpInstance {
            x0: augment(x, &u_prev),
            v_ref: &v_ref,
            weights: &self.weights,
            cfg: &self.cfg,
            params: &self.model,
            path,
        };
        let start = Instant::now();
        let sol: OcpSolution = solve_sqp(&inst, self.warm.as_ref());
        let solve_time = start.elapsed().as_secs_f64();

        if !sol.status.is_usable() {
            self.consecutive_failures += 1;
            self.warm = None;
            if self.consecutive_failures >= self.max_failures {
                return Err(NmpcError::TooManyFailures(self.consecutive_failures));
            }
            return Ok(ControlOutput {
                input: u_prev,
                status: sol.status,
                cost: f64::NAN,
                sqp_iters: sol.sqp_iters,
                qp_iters: sol.qp_iters,
                solve_time,
                fallback: true,
            });
        }
        self.consecutive_failures = 0;
        let input = self.cfg.clip_input(&sol.first_input());
        let (states, rates) = sol.shifted();
        self.warm = Some(WarmStart {
            states,
            rates,
            active_set: sol.active_set.clone(),
        });
        Ok(ControlOutput {
            input,
            status: sol.status,
            cost: sol.cost,
            sqp_iters: sol.sqp_iters,
            qp_iters: sol.qp_iters,
            solve_time,
            fallback: false,
        })
    }
}
