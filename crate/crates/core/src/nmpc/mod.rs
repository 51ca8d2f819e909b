//! Path-following NMPC on the input-rate-augmented single-track model.
//!
//! The augmented state is `ξ = (x, u)`, the decision variables are input
//! rates `u̇`. Over one sampling interval the input is first advanced,
//! `v = u + Ts·u̇`, then held while the vehicle state is integrated with one
//! RK4 step, so `ξ⁺ = (rk4(x, v), v)`.

mod controller;
pub mod qp;
mod sqp;

pub use controller::{ControlOutput, NmpcController, NmpcError};
pub use qp::{qp_solve, ConstraintId, QpError, QpProblem, QpSettings, QpSolution};
pub use sqp::{solve_sqp, OcpInstance, OcpSolution, SolveStatus, WarmStart};

use crate::dynamics::{predict_step, ControlInput, DynamicsError, SingleTrackParams, VehicleState};
use nalgebra::SVector;
use serde::{Deserialize, Serialize};

pub const NX: usize = 6;
pub const NU: usize = 2;
pub const NA: usize = NX + NU;

/// Augmented state `[vx, vy, r, s, w, theta, delta, tr]`.
pub type AugState = SVector<f64, NA>;

pub fn augment(x: &VehicleState, u: &ControlInput) -> AugState {
    let v = x.to_vector();
    AugState::from_fn(|i, _| if i < NX { v[i] } else { u.to_array()[i - NX] })
}

pub fn split(xi: &AugState) -> (VehicleState, ControlInput) {
    let x = VehicleState::from_vector(&xi.fixed_rows::<NX>(0).into_owned());
    (x, ControlInput::new(xi[NX], xi[NX + 1]))
}

/// Diagonal cost weights: `q` on the tracking error, `r` on the applied input
/// and `s` on the input rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmpcWeights {
    pub q: [f64; NX],
    pub r: [f64; NU],
    pub s: [f64; NU],
}

/// Number of scalar weights in [`NmpcWeights`].
pub const NUM_WEIGHTS: usize = NX + 2 * NU;

impl Default for NmpcWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl NmpcWeights {
    pub fn uniform(v: f64) -> Self {
        Self {
            q: [v; NX],
            r: [v; NU],
            s: [v; NU],
        }
    }

    /// Flattened `[q…, r…, s…]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.q
            .iter()
            .chain(&self.r)
            .chain(&self.s)
            .copied()
            .collect()
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        if v.len() != NUM_WEIGHTS {
            return None;
        }
        let mut w = Self::uniform(0.0);
        w.q.copy_from_slice(&v[..NX]);
        w.r.copy_from_slice(&v[NX..NX + NU]);
        w.s.copy_from_slice(&v[NX + NU..]);
        Some(w)
    }

    pub fn scaled(&self, f: f64) -> Self {
        let v: Vec<f64> = self.to_vec().iter().map(|w| w * f).collect();
        Self::from_slice(&v).expect("same length")
    }

    pub fn is_valid(&self) -> bool {
        self.to_vec().iter().all(|w| w.is_finite() && *w >= 0.0)
            && self.r.iter().chain(&self.s).all(|w| *w > 0.0)
    }
}

/// Horizon, bounds and solver settings of the optimal control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    pub horizon: usize,
    pub ts: f64,
    /// Multiplier on the tracking weight at the last stage.
    pub terminal_scale: f64,
    pub u_min: [f64; NU],
    pub u_max: [f64; NU],
    pub udot_min: [f64; NU],
    pub udot_max: [f64; NU],
    pub vx_min: f64,
    pub vx_max: f64,
    /// Bound the lateral offset by the track half-widths.
    pub track_limits: bool,
    pub sqp_max_iters: usize,
    /// Stop when the infinity norm of the SQP step drops below this.
    pub sqp_tol: f64,
    /// Largest rate correction per SQP iteration.
    pub step_cap: f64,
    pub qp_tol: f64,
    pub qp_max_iters: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            ts: 0.04,
            terminal_scale: 10.0,
            u_min: [-0.5, -1.0],
            u_max: [0.5, 1.0],
            udot_min: [-0.5, -2.0],
            udot_max: [0.5, 2.0],
            vx_min: 1.0,
            vx_max: 60.0,
            track_limits: true,
            sqp_max_iters: 10,
            sqp_tol: 1e-4,
            step_cap: 5.0,
            qp_tol: 1e-9,
            qp_max_iters: 2000,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("horizon must be positive".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err("ts must be positive".into());
        }
        if !(self.terminal_scale >= 0.0) {
            return Err("terminal_scale must be non-negative".into());
        }
        for i in 0..NU {
            if !(self.u_min[i] < self.u_max[i]) || !(self.udot_min[i] < self.udot_max[i]) {
                return Err("input bounds must satisfy min < max".into());
            }
            if !(self.udot_min[i] <= 0.0 && self.udot_max[i] >= 0.0) {
                return Err("rate bounds must contain zero".into());
            }
        }
        if !(self.vx_min < self.vx_max) {
            return Err("vx_min must be below vx_max".into());
        }
        if self.sqp_max_iters == 0 || !(self.sqp_tol > 0.0) || !(self.step_cap > 0.0) {
            return Err("invalid SQP settings".into());
        }
        if self.qp_max_iters == 0 || !(self.qp_tol > 0.0) {
            return Err("invalid QP settings".into());
        }
        Ok(())
    }

    pub fn clip_input(&self, u: &ControlInput) -> ControlInput {
        ControlInput::new(
            u.delta.clamp(self.u_min[0], self.u_max[0]),
            u.tr.clamp(self.u_min[1], self.u_max[1]),
        )
    }
}

/// One stage of the augmented discrete dynamics.
pub fn augment_dynamics(
    xi: &AugState,
    udot: &[f64; NU],
    ts: f64,
    kappa: f64,
    params: &SingleTrackParams,
) -> Result<AugState, DynamicsError> {
    let (x, u) = split(xi);
    let v = ControlInput::new(u.delta + ts * udot[0], u.tr + ts * udot[1]);
    let next = predict_step(&x, &v, params, kappa, ts)?;
    Ok(augment(&next, &v))
}

/// Tracking error `[vx − v_ref, vy, r, 0, w, theta]`; `s` is left free.
pub fn tracking_error(xi: &AugState, v_ref: f64) -> [f64; NX] {
    [xi[0] - v_ref, xi[1], xi[2], 0.0, xi[4], xi[5]]
}

/// Stage cost `eᵀQe + vᵀRv + u̇ᵀSu̇` where `e` is the error at the start of
/// the interval and `v` the input applied over it.
pub fn stage_cost(
    xi: &AugState,
    v_ref: f64,
    applied: &ControlInput,
    udot: &[f64; NU],
    w: &NmpcWeights,
) -> f64 {
    let e = tracking_error(xi, v_ref);
    let mut c = 0.0;
    for i in 0..NX {
        c += w.q[i] * e[i] * e[i];
    }
    let v = applied.to_array();
    for i in 0..NU {
        c += w.r[i] * v[i] * v[i] + w.s[i] * udot[i] * udot[i];
    }
    c
}

pub fn terminal_cost(xi: &AugState, v_ref: f64, w: &NmpcWeights, scale: f64) -> f64 {
    let e = tracking_error(xi, v_ref);
    scale * (0..NX).map(|i| w.q[i] * e[i] * e[i]).sum::<f64>()
}
