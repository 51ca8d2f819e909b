use nalgebra::SVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    body_accelerations, rk4_step, slip_angles, throttle_to_forces, AxleForces, DynamicsError,
    SingleTrackParams,
};
use crate::path::{normalize_angle, CartesianPose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TireModel {
    Linear,
    /// `F_y = D sin(C atan(B α))` per axle.
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TireShape {
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl TireShape {
    pub fn force(&self, alpha: f64) -> f64 {
        self.d * (self.c * (self.b * alpha).atan()).sin()
    }

    pub fn cornering_stiffness(&self) -> f64 {
        self.b * self.c * self.d
    }
}

/// Relative standard deviations of the multiplicative parameter perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationStd {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub cornering_front: f64,
    pub cornering_rear: f64,
    pub max_drive_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub nominal: SingleTrackParams,
    pub tire_model: TireModel,
    pub tire_front: TireShape,
    pub tire_rear: TireShape,
    /// Steering actuator time constant [s]; zero means no lag.
    pub tau_delta: f64,
    /// Throttle actuator time constant [s].
    pub tau_tr: f64,
    #[serde(default)]
    pub randomization: RandomizationStd,
    /// Diffusion of the additive noise on (vx, vy, r), per sqrt(second).
    #[serde(default)]
    pub process_noise_std: [f64; 3],
}

impl PlantConfig {
    /// Plant identical to the prediction model: linear tires, no lag, no noise.
    pub fn model_identity(params: SingleTrackParams) -> Self {
        Self {
            nominal: params,
            tire_model: TireModel::Linear,
            tire_front: TireShape {
                b: 10.0,
                c: 1.3,
                d: params.cornering_front / 13.0,
            },
            tire_rear: TireShape {
                b: 10.0,
                c: 1.3,
                d: params.cornering_rear / 13.0,
            },
            tau_delta: 0.0,
            tau_tr: 0.0,
            randomization: RandomizationStd::default(),
            process_noise_std: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        self.nominal.validate()?;
        if self.tau_delta < 0.0 || self.tau_tr < 0.0 {
            return Err(DynamicsError::InvalidParams(
                "time constants must be >= 0".into(),
            ));
        }
        let r = &self.randomization;
        let stds = [
            r.mass,
            r.yaw_inertia,
            r.cornering_front,
            r.cornering_rear,
            r.max_drive_force,
        ];
        if stds
            .iter()
            .chain(&self.process_noise_std)
            .any(|s| !(*s >= 0.0))
        {
            return Err(DynamicsError::InvalidParams("std-devs must be >= 0".into()));
        }
        if stds.iter().any(|s| *s >= 1.0 / 3.0) {
            return Err(DynamicsError::InvalidParams(
                "relative std-devs must stay below 1/3 to keep parameters positive".into(),
            ));
        }
        for t in [&self.tire_front, &self.tire_rear] {
            if !(t.b > 0.0 && t.c > 0.0 && t.d > 0.0) {
                return Err(DynamicsError::InvalidParams(
                    "tire shape must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A realized plant: one parameter draw plus the configured structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub params: SingleTrackParams,
    pub tire_model: TireModel,
    pub tire_front: TireShape,
    pub tire_rear: TireShape,
    pub tau_delta: f64,
    pub tau_tr: f64,
    pub process_noise_std: [f64; 3],
}

impl PlantModel {
    pub fn from_params(cfg: &PlantConfig, params: SingleTrackParams) -> Self {
        // The saturating tire follows the drawn cornering stiffness through B.
        let mut tire_front = cfg.tire_front;
        let mut tire_rear = cfg.tire_rear;
        tire_front.b *= params.cornering_front / cfg.nominal.cornering_front;
        tire_rear.b *= params.cornering_rear / cfg.nominal.cornering_rear;
        Self {
            params,
            tire_model: cfg.tire_model,
            tire_front,
            tire_rear,
            tau_delta: cfg.tau_delta,
            tau_tr: cfg.tau_tr,
            process_noise_std: cfg.process_noise_std,
        }
    }

    pub fn nominal(cfg: &PlantConfig) -> Self {
        Self::from_params(cfg, cfg.nominal)
    }

    pub fn randomized<R: Rng + ?Sized>(cfg: &PlantConfig, rng: &mut R) -> Self {
        Self::from_params(cfg, randomize_plant(cfg, rng))
    }

    pub fn lateral_forces(&self, alpha_f: f64, alpha_r: f64) -> (f64, f64) {
        match self.tire_model {
            TireModel::Linear => (
                self.params.cornering_front * alpha_f,
                self.params.cornering_rear * alpha_r,
            ),
            TireModel::Nonlinear => (
                self.tire_front.force(alpha_f),
                self.tire_rear.force(alpha_r),
            ),
        }
    }
}

/// Plant state in the Cartesian frame, with lagged actuator positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub act_delta: f64,
    pub act_tr: f64,
}

type PlantVector = SVector<f64, 8>;

impl PlantState {
    pub fn pose(&self) -> CartesianPose {
        CartesianPose::new(self.x, self.y, self.psi)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    fn to_vector(self) -> PlantVector {
        PlantVector::from([
            self.x,
            self.y,
            self.psi,
            self.vx,
            self.vy,
            self.r,
            self.act_delta,
            self.act_tr,
        ])
    }

    fn from_vector(v: &PlantVector) -> Self {
        Self {
            x: v[0],
            y: v[1],
            psi: v[2],
            vx: v[3],
            vy: v[4],
            r: v[5],
            act_delta: v[6],
            act_tr: v[7],
        }
    }
}

fn plant_derivatives(v: &PlantVector, cmd: &[f64; 2], model: &PlantModel) -> PlantVector {
    let s = PlantState::from_vector(v);
    let p = &model.params;
    let delta = s.act_delta;
    let tr = s.act_tr.clamp(-1.0, 1.0);
    let (alpha_f, alpha_r) = slip_angles(s.vx, s.vy, s.r, delta, p);
    let (fyf, fyr) = model.lateral_forces(alpha_f, alpha_r);
    let (fxf, fxr) = throttle_to_forces(tr, p);
    let forces = AxleForces { fxf, fxr, fyf, fyr };
    let (vx_dot, vy_dot, r_dot) = body_accelerations(s.vx, s.vy, s.r, delta, &forces, p);
    let (sp, cp) = s.psi.sin_cos();
    let lag = |tau: f64, target: f64, current: f64| {
        if tau > 0.0 {
            (target - current) / tau
        } else {
            0.0
        }
    };
    PlantVector::from([
        s.vx * cp - s.vy * sp,
        s.vx * sp + s.vy * cp,
        s.r,
        vx_dot,
        vy_dot,
        r_dot,
        lag(model.tau_delta, cmd[0], s.act_delta),
        lag(model.tau_tr, cmd[1], s.act_tr),
    ])
}

/// Advances the plant by `dt` under a held command, then adds process noise.
pub fn plant_step<R: Rng + ?Sized>(
    ps: &PlantState,
    u_cmd: &super::ControlInput,
    dt: f64,
    model: &PlantModel,
    rng: &mut R,
) -> Result<PlantState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidParams("dt must be positive".into()));
    }
    let mut start = *ps;
    let cmd = [u_cmd.delta, u_cmd.tr.clamp(-1.0, 1.0)];
    if model.tau_delta == 0.0 {
        start.act_delta = cmd[0];
    }
    if model.tau_tr == 0.0 {
        start.act_tr = cmd[1];
    }
    let next = rk4_step(
        |v: &PlantVector, c: &[f64; 2]| Ok(plant_derivatives(v, c, model)),
        &start.to_vector(),
        &cmd,
        dt,
    )?;
    let mut out = PlantState::from_vector(&next);
    let sq = dt.sqrt();
    let [nvx, nvy, nr] = model.process_noise_std;
    if nvx > 0.0 {
        out.vx += nvx * sq * rng.sample::<f64, _>(StandardNormal);
    }
    if nvy > 0.0 {
        out.vy += nvy * sq * rng.sample::<f64, _>(StandardNormal);
    }
    if nr > 0.0 {
        out.r += nr * sq * rng.sample::<f64, _>(StandardNormal);
    }
    out.vx = out.vx.max(0.0);
    out.psi = normalize_angle(out.psi);
    if !out.is_finite() {
        return Err(DynamicsError::Diverged);
    }
    Ok(out)
}

/// Draws `1 + ε` with ε ~ N(0, std²) truncated at ±3 std (by rejection).
fn perturbation<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 1.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return 1.0 + std * z;
        }
    }
}

/// Domain randomization of the physical parameters.
pub fn randomize_plant<R: Rng + ?Sized>(cfg: &PlantConfig, rng: &mut R) -> SingleTrackParams {
    let r = &cfg.randomization;
    let mut p = cfg.nominal;
    p.mass *= perturbation(r.mass, rng);
    p.yaw_inertia *= perturbation(r.yaw_inertia, rng);
    p.cornering_front *= perturbation(r.cornering_front, rng);
    p.cornering_rear *= perturbation(r.cornering_rear, rng);
    p.max_drive_force *= perturbation(r.max_drive_force, rng);
    p
}
