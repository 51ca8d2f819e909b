//! Single-track vehicle dynamics in the curvilinear frame, the RK4
//! integrator, the higher-fidelity surrogate plant, and closed-loop rollouts.

mod plant;
mod rollout;

pub use plant::{
    plant_step, randomize_plant, PlantConfig, PlantModel, PlantState, RandomizationStd, TireModel,
    TireShape,
};
pub use rollout::{
    rollout_on, xdt_rollout, LoopEnv, LoopError, LoopState, PerformanceWindow, RolloutError,
    StepRecord,
};

use nalgebra::SVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("singular curvilinear projection (1 - kappa*w = {0:e})")]
    SingularProjection(f64),
    #[error("integration diverged (non-finite state)")]
    Diverged,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Physical parameters of the single-track model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleTrackParams {
    /// Mass [kg].
    pub mass: f64,
    /// Yaw inertia [kg m^2].
    pub yaw_inertia: f64,
    /// CoG to front axle [m].
    pub lf: f64,
    /// CoG to rear axle [m].
    pub lr: f64,
    /// Front cornering stiffness [N/rad].
    pub cornering_front: f64,
    /// Rear cornering stiffness [N/rad].
    pub cornering_rear: f64,
    /// Drive force at full throttle [N].
    pub max_drive_force: f64,
    /// Fraction of the longitudinal force on the front axle.
    pub drive_split: f64,
    /// Constant rolling resistance [N].
    pub roll_resistance: f64,
    /// Quadratic aerodynamic drag [N s^2/m^2].
    pub aero_drag: f64,
    /// Floor on vx in slip-angle denominators [m/s].
    pub v_eps: f64,
}

impl Default for SingleTrackParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            yaw_inertia: 2500.0,
            lf: 1.2,
            lr: 1.4,
            cornering_front: 1.0e5,
            cornering_rear: 1.0e5,
            max_drive_force: 6000.0,
            drive_split: 0.0,
            roll_resistance: 200.0,
            aero_drag: 0.4,
            v_eps: 0.5,
        }
    }
}

impl SingleTrackParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cornering_front", self.cornering_front),
            ("cornering_rear", self.cornering_rear),
            ("max_drive_force", self.max_drive_force),
            ("v_eps", self.v_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.drive_split) {
            return Err(DynamicsError::InvalidParams(
                "drive_split must lie in [0, 1]".into(),
            ));
        }
        if self.roll_resistance < 0.0 || self.aero_drag < 0.0 {
            return Err(DynamicsError::InvalidParams(
                "resistances must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Driving resistance at speed `vx`.
    pub fn resistance(&self, vx: f64) -> f64 {
        self.roll_resistance + self.aero_drag * vx * vx
    }
}

/// Curvilinear state `[vx, vy, r, s, w, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub s: f64,
    pub w: f64,
    pub theta: f64,
}

pub type StateVector = SVector<f64, 6>;

impl VehicleState {
    pub fn to_vector(&self) -> StateVector {
        StateVector::new(self.vx, self.vy, self.r, self.s, self.w, self.theta)
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            vx: v[0],
            vy: v[1],
            r: v[2],
            s: v[3],
            w: v[4],
            theta: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Road-wheel steering angle [rad] and normalized throttle/brake in [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta: f64,
    pub tr: f64,
}

impl ControlInput {
    pub fn new(delta: f64, tr: f64) -> Self {
        Self { delta, tr }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.delta, self.tr]
    }
}

pub fn slip_angles(vx: f64, vy: f64, r: f64, delta: f64, p: &SingleTrackParams) -> (f64, f64) {
    let u = vx.max(p.v_eps);
    let alpha_f = delta - ((vy + p.lf * r) / u).atan();
    let alpha_r = -((vy - p.lr * r) / u).atan();
    (alpha_f, alpha_r)
}

/// Lateral axle forces `(F_yf, F_yr)` from constant cornering stiffness.
pub fn linear_tire_forces(x: &VehicleState, delta: f64, p: &SingleTrackParams) -> (f64, f64) {
    let (alpha_f, alpha_r) = slip_angles(x.vx, x.vy, x.r, delta, p);
    (p.cornering_front * alpha_f, p.cornering_rear * alpha_r)
}

/// Longitudinal axle forces `(F_xf, F_xr)`; braking is symmetric to driving.
pub fn throttle_to_forces(tr: f64, p: &SingleTrackParams) -> (f64, f64) {
    let fx = tr * p.max_drive_force;
    (p.drive_split * fx, (1.0 - p.drive_split) * fx)
}

/// Axle forces acting on the body.
#[derive(Debug, Clone, Copy)]
pub struct AxleForces {
    pub fxf: f64,
    pub fxr: f64,
    pub fyf: f64,
    pub fyr: f64,
}

/// Body-frame accelerations `(v̇x, v̇y, ṙ)` shared by the prediction model and
/// the plant.
pub fn body_accelerations(
    vx: f64,
    vy: f64,
    r: f64,
    delta: f64,
    f: &AxleForces,
    p: &SingleTrackParams,
) -> (f64, f64, f64) {
    let (sd, cd) = delta.sin_cos();
    let m = p.mass;
    let vx_dot = (f.fxf * cd + f.fxr - f.fyf * sd - p.resistance(vx) + m * r * vy) / m;
    let vy_dot = (f.fxf * sd + f.fyr + f.fyf * cd - m * r * vx) / m;
    let r_dot = (p.lf * (f.fyf * cd + f.fxf * sd) - p.lr * f.fyr) / p.yaw_inertia;
    (vx_dot, vy_dot, r_dot)
}

/// Time derivative of the curvilinear single-track state.
pub fn single_track_derivatives(
    x: &VehicleState,
    u: &ControlInput,
    p: &SingleTrackParams,
    kappa: f64,
) -> Result<VehicleState, DynamicsError> {
    let denom = 1.0 - kappa * x.w;
    if denom.abs() < 1e-9 {
        return Err(DynamicsError::SingularProjection(denom));
    }
    let (fyf, fyr) = linear_tire_forces(x, u.delta, p);
    let (fxf, fxr) = throttle_to_forces(u.tr, p);
    let forces = AxleForces { fxf, fxr, fyf, fyr };
    let (vx_dot, vy_dot, r_dot) = body_accelerations(x.vx, x.vy, x.r, u.delta, &forces, p);
    let (st, ct) = x.theta.sin_cos();
    let s_dot = (x.vx * ct - x.vy * st) / denom;
    Ok(VehicleState {
        vx: vx_dot,
        vy: vy_dot,
        r: r_dot,
        s: s_dot,
        w: x.vx * st + x.vy * ct,
        theta: x.r - kappa * s_dot,
    })
}

/// One classical RK4 step with the input held constant over `dt`.
pub fn rk4_step<const D: usize, U, F>(
    mut f: F,
    x: &SVector<f64, D>,
    u: &U,
    dt: f64,
) -> Result<SVector<f64, D>, DynamicsError>
where
    F: FnMut(&SVector<f64, D>, &U) -> Result<SVector<f64, D>, DynamicsError>,
{
    let finite = |v: &SVector<f64, D>| {
        if v.iter().all(|e| e.is_finite()) {
            Ok(())
        } else {
            Err(DynamicsError::Diverged)
        }
    };
    let k1 = f(x, u)?;
    finite(&k1)?;
    let k2 = f(&(x + k1 * (0.5 * dt)), u)?;
    finite(&k2)?;
    let k3 = f(&(x + k2 * (0.5 * dt)), u)?;
    finite(&k3)?;
    let k4 = f(&(x + k3 * dt), u)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    finite(&next)?;
    Ok(next)
}

/// Discrete prediction model: one RK4 step of the curvilinear dynamics with
/// curvature frozen at `kappa` over the step.
pub fn predict_step(
    x: &VehicleState,
    u: &ControlInput,
    p: &SingleTrackParams,
    kappa: f64,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    let next = rk4_step(
        |v: &StateVector, u: &ControlInput| {
            single_track_derivatives(&VehicleState::from_vector(v), u, p, kappa)
                .map(|d| d.to_vector())
        },
        &x.to_vector(),
        u,
        dt,
    )?;
    Ok(VehicleState::from_vector(&next))
}
