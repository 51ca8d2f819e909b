//! Scenario configuration, read from TOML.

use crate::dynamics::{PlantConfig, RandomizationStd, SingleTrackParams, TireModel, TireShape};
use crate::nmpc::{NmpcWeights, OcpConfig};
use crate::path::DlcGeometry;
use crate::tuner::{TunerConfig, TunerKind};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub tuner_kind: TunerKind,
    /// Length of one tuning window [s]; must be a multiple of the sampling time.
    pub window_seconds: f64,
    /// Plant integration steps per control period.
    pub plant_substeps: usize,
    /// Signal-to-noise ratio of the output noise added to the measured
    /// performance vector; absent means no noise.
    pub snr_db: Option<f64>,
    /// Spacing of the sampled reference path [m].
    pub path_spacing: f64,
    /// Largest lateral distance the projection accepts [m].
    pub corridor: f64,
    /// Extra distance kept free before the path end, on top of one horizon [m].
    pub end_margin: f64,
    pub initial_weights: NmpcWeights,
    pub dlc: DlcGeometry,
    /// Prediction model used by the controller.
    pub model: SingleTrackParams,
    /// Surrogate plant: the real vehicle is one draw, every rollout a fresh one.
    pub plant: PlantConfig,
    pub nmpc: OcpConfig,
    pub tuner: TunerConfig,
}

/// Prediction model of the scenario: drive force per unit throttle sized so
/// that cruising at entry speed needs about half throttle.
pub fn default_model() -> SingleTrackParams {
    SingleTrackParams {
        max_drive_force: 1600.0,
        roll_resistance: 400.0,
        aero_drag: 0.8,
        ..SingleTrackParams::default()
    }
}

/// Default plant: heavier and slightly draggier than the prediction model,
/// with different cornering stiffnesses, saturating tires and actuator lag.
pub fn default_plant() -> PlantConfig {
    let nominal = SingleTrackParams {
        mass: 1650.0,
        yaw_inertia: 2900.0,
        cornering_front: 0.9e5,
        cornering_rear: 1.1e5,
        roll_resistance: 420.0,
        aero_drag: 0.85,
        ..default_model()
    };
    PlantConfig {
        nominal,
        tire_model: TireModel::Nonlinear,
        tire_front: TireShape {
            b: 10.0,
            c: 1.3,
            d: nominal.cornering_front / 13.0,
        },
        tire_rear: TireShape {
            b: 10.0,
            c: 1.3,
            d: nominal.cornering_rear / 13.0,
        },
        tau_delta: 0.08,
        tau_tr: 0.15,
        randomization: RandomizationStd {
            mass: 0.05,
            yaw_inertia: 0.05,
            cornering_front: 0.05,
            cornering_rear: 0.05,
            max_drive_force: 0.05,
        },
        process_noise_std: [0.02, 0.01, 0.002],
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            tuner_kind: TunerKind::Ukf,
            window_seconds: 3.0,
            plant_substeps: 4,
            snr_db: None,
            path_spacing: 0.5,
            corridor: 10.0,
            end_margin: 5.0,
            initial_weights: NmpcWeights::uniform(1.0),
            dlc: DlcGeometry::default(),
            model: default_model(),
            plant: default_plant(),
            nmpc: OcpConfig::default(),
            tuner: TunerConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Samples per tuning window.
    pub fn window_len(&self) -> usize {
        (self.window_seconds / self.nmpc.ts).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.nmpc.validate().map_err(ConfigError::Invalid)?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plant
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tuner
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let ratio = self.window_seconds / self.nmpc.ts;
        if !(self.window_seconds > 0.0)
            || (ratio - ratio.round()).abs() > 1e-9
            || ratio.round() < 1.0
        {
            return bad(format!(
                "window_seconds ({}) must be a positive multiple of ts ({})",
                self.window_seconds, self.nmpc.ts
            ));
        }
        if self.plant_substeps == 0 {
            return bad("plant_substeps must be positive".into());
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return bad("snr_db must be a number".into());
            }
        }
        if !(self.path_spacing > 0.0 && self.corridor > 0.0 && self.end_margin >= 0.0) {
            return bad("path_spacing and corridor must be positive, end_margin >= 0".into());
        }
        if !self.initial_weights.is_valid() {
            return bad("initial_weights must be finite with q >= 0 and r, s > 0".into());
        }
        let d = &self.dlc;
        if d.repeats == 0 || d.section_lengths.iter().any(|l| !(*l > 0.0)) || !(d.entry_speed > 0.0)
        {
            return bad("dlc needs positive sections, speed and repeat count".into());
        }
        Ok(())
    }
}
