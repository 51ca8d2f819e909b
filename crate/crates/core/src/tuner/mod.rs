//! Online adaptation of the NMPC weights: sigma-point filtering (UKF),
//! SPSA, and their averaged combination, fed by closed-loop rollouts.

pub mod spsa;
pub mod ukf;

pub use spsa::{combined_step, spsa_gradient, spsa_loss, spsa_update, SpsaEstimate};
pub use ukf::{
    compute_weights, measurement_update, regularize_step, sample_sigma_points, unscented_transform,
    update_output_noise, SigmaSet,
};

use crate::dynamics::PerformanceWindow;
use crate::nmpc::{NmpcWeights, NUM_WEIGHTS};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TunerError {
    #[error("invalid tuner configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive semidefinite")]
    Cholesky,
    #[error("{failed} rollouts failed (limit {limit})")]
    RolloutsFailed { failed: usize, limit: usize },
    #[error("output covariance ill-conditioned (condition {0:e})")]
    IllConditioned(f64),
    #[error("performance window has {got} samples, expected {expected}")]
    IncompleteWindow { got: usize, expected: usize },
    #[error("empty state window")]
    EmptyWindow,
}

/// Elementwise box on the tuned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub low: DVector<f64>,
    pub high: DVector<f64>,
}

impl Bounds {
    pub fn uniform(p: usize, low: f64, high: f64) -> Self {
        Self {
            low: DVector::from_element(p, low),
            high: DVector::from_element(p, high),
        }
    }

    pub fn clip(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(theta.len(), |i, _| {
            theta[i].clamp(self.low[i], self.high[i])
        })
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        (0..theta.len()).all(|i| theta[i] >= self.low[i] && theta[i] <= self.high[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TunerKind {
    #[default]
    None,
    Ukf,
    Spsa,
    UkfSpsa,
}

impl TunerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TunerKind::None => "none",
            TunerKind::Ukf => "ukf",
            TunerKind::Spsa => "spsa",
            TunerKind::UkfSpsa => "ukf_spsa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(TunerKind::None),
            "ukf" => Some(TunerKind::Ukf),
            "spsa" => Some(TunerKind::Spsa),
            "ukf_spsa" => Some(TunerKind::UkfSpsa),
            _ => None,
        }
    }

    pub fn uses_ukf(&self) -> bool {
        matches!(self, TunerKind::Ukf | TunerKind::UkfSpsa)
    }

    pub fn uses_spsa(&self) -> bool {
        matches!(self, TunerKind::Spsa | TunerKind::UkfSpsa)
    }
}

/// Tuner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    /// Indices into the flattened weights `[q0..q5, r0, r1, s0, s1]`.
    pub slots: Vec<usize>,
    pub bound_low: f64,
    pub bound_high: f64,
    /// Updated means stay this far inside the bounds, so the sigma points
    /// never collapse onto a mean sitting on a bound.
    pub mean_margin: f64,
    pub lambda: f64,
    /// Initial belief covariance `P₀ = p0·I`.
    pub p0: f64,
    /// Process noise `C_θ = c_theta_std²·I`.
    pub c_theta_std: f64,
    /// Initial output-noise variance per channel.
    pub c_n0: f64,
    /// Blend factor of the output-noise update.
    pub gamma: f64,
    pub c_n_floor: f64,
    /// Skip the filter update when `P_y` is worse conditioned than this.
    pub max_condition: f64,
    /// Activation threshold on the cost channel; `None` uses the raw cost.
    pub j_threshold: Option<f64>,
    pub spsa_a: f64,
    pub spsa_c: f64,
    /// Perturbation magnitudes, cycled over the pairs.
    pub spsa_magnitudes: Vec<f64>,
    /// Pairs per gradient estimate; `None` means `2p`.
    pub spsa_pairs: Option<usize>,
    /// Reject candidates that fail the energy check. When off, the check is
    /// still evaluated and logged.
    pub energy_gate: bool,
    pub energy_floor: f64,
    /// Evaluate every rollout of one update on the same plant draw.
    pub common_random_numbers: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            slots: vec![0, 4],
            bound_low: 0.1,
            bound_high: 100.0,
            mean_margin: 0.05,
            lambda: 1.0,
            p0: 1.0,
            c_theta_std: 0.3,
            c_n0: 1.0,
            gamma: 0.3,
            c_n_floor: 1e-6,
            max_condition: 1e12,
            j_threshold: Some(50.0),
            spsa_a: 0.05,
            spsa_c: 0.1,
            spsa_magnitudes: vec![1.0, 2.0],
            spsa_pairs: None,
            energy_gate: false,
            energy_floor: 1e-6,
            common_random_numbers: true,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |m: &str| Err(TunerError::InvalidConfig(m.into()));
        if self.slots.is_empty() || self.slots.iter().any(|&s| s >= NUM_WEIGHTS) {
            return bad("slots must be non-empty indices below 10");
        }
        let mut sorted = self.slots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.slots.len() {
            return bad("slots must be distinct");
        }
        if !(self.bound_low > 0.0 && self.bound_low < self.bound_high) {
            return bad("bounds must satisfy 0 < bound_low < bound_high");
        }
        if !(self.mean_margin >= 0.0 && 2.0 * self.mean_margin < self.bound_high - self.bound_low) {
            return bad("mean_margin must be non-negative and leave room between the bounds");
        }
        if !(self.slots.len() as f64 + self.lambda > 0.0) {
            return bad("p + lambda must be positive");
        }
        if !(self.p0 >= 0.0 && self.c_theta_std >= 0.0 && self.c_n0 > 0.0 && self.c_n_floor > 0.0) {
            return bad("covariances must be non-negative and c_n0, c_n_floor positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.j_threshold.is_some_and(|j| !(j >= 0.0)) {
            return bad("j_threshold must be non-negative");
        }
        if !(self.spsa_a >= 0.0 && self.spsa_c > 0.0) {
            return bad("spsa_a must be >= 0 and spsa_c > 0");
        }
        if self.spsa_magnitudes.is_empty() || self.spsa_magnitudes.iter().any(|m| !(*m > 0.0)) {
            return bad("spsa_magnitudes must be positive");
        }
        if self.spsa_pairs == Some(0) {
            return bad("spsa_pairs must be positive");
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.slots.len()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::uniform(self.p(), self.bound_low, self.bound_high)
    }

    /// Box the updated mean is clipped to.
    pub fn mean_bounds(&self) -> Bounds {
        Bounds::uniform(
            self.p(),
            self.bound_low + self.mean_margin,
            self.bound_high - self.mean_margin,
        )
    }
}

/// `max(J, J̲) − J̲`.
pub fn cost_activation(j_opt: f64, j_threshold: f64) -> f64 {
    j_opt.max(j_threshold) - j_threshold
}

/// `h = [10·v_err; 10·w; J channel]` over a complete window of `n` samples.
/// Missing costs (failed solves) repeat the last finite value.
pub fn performance_metric(
    window: &PerformanceWindow,
    n: usize,
    j_threshold: Option<f64>,
) -> Result<DVector<f64>, TunerError> {
    let complete = window.v_err.len() == n && window.w_dev.len() == n && window.j_opt.len() == n;
    if !complete {
        return Err(TunerError::IncompleteWindow {
            got: window.len(),
            expected: n,
        });
    }
    let mut h = DVector::zeros(3 * n);
    let mut last_j = 0.0;
    for i in 0..n {
        h[i] = 10.0 * window.v_err[i];
        h[n + i] = 10.0 * window.w_dev[i];
        if window.j_opt[i].is_finite() {
            last_j = window.j_opt[i];
        }
        h[2 * n + i] = match j_threshold {
            Some(t) => cost_activation(last_j, t),
            None => last_j,
        };
    }
    Ok(h)
}

/// Per-step signals the energy check weights with the matching entries of
/// `θ`: `[v_err, vy, r, 0, w, theta, delta, tr, delta_rate, tr_rate]`.
pub type EnergySample = [f64; NUM_WEIGHTS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub v_candidate: f64,
    pub v_current: f64,
    pub accepted: bool,
}

/// `Σ_window xᵀ diag(θ) x` over the slots θ maps to, with θ floored at
/// `floor`.
pub fn energy(theta: &DVector<f64>, slots: &[usize], window: &[EnergySample], floor: f64) -> f64 {
    window
        .iter()
        .map(|x| {
            slots
                .iter()
                .enumerate()
                .map(|(i, &s)| theta[i].max(floor) * x[s] * x[s])
                .sum::<f64>()
        })
        .sum()
}

pub fn energy_check(
    candidate: &DVector<f64>,
    current: &DVector<f64>,
    slots: &[usize],
    window: &[EnergySample],
    floor: f64,
) -> Result<EnergyReport, TunerError> {
    if window.is_empty() {
        return Err(TunerError::EmptyWindow);
    }
    let v_candidate = energy(candidate, slots, window, floor);
    let v_current = energy(current, slots, window, floor);
    Ok(EnergyReport {
        v_candidate,
        v_current,
        accepted: v_candidate <= v_current,
    })
}

/// Second energy check, made after a window has run with the new weights:
/// mean per-step energy under the deployed θ after versus before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostDeploymentCheck {
    pub v_before: f64,
    pub v_after: f64,
    pub samples_after: usize,
    pub non_increase: bool,
}

pub fn post_deployment_check(
    theta: &DVector<f64>,
    slots: &[usize],
    before: &[EnergySample],
    after: &[EnergySample],
    floor: f64,
) -> PostDeploymentCheck {
    let mean = |w: &[EnergySample]| {
        if w.is_empty() {
            0.0
        } else {
            energy(theta, slots, w, floor) / w.len() as f64
        }
    };
    let v_before = mean(before);
    let v_after = mean(after);
    PostDeploymentCheck {
        v_before,
        v_after,
        samples_after: after.len(),
        non_increase: v_after <= v_before,
    }
}

/// Everything logged about one tuner update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub index: usize,
    pub t: f64,
    pub kind: TunerKind,
    pub theta_before: Vec<f64>,
    pub theta_candidate: Vec<f64>,
    pub theta_after: Vec<f64>,
    pub c_k: Option<f64>,
    pub degenerate_sigma: bool,
    pub gain_norm: Option<f64>,
    pub delta_ukf: Option<Vec<f64>>,
    pub delta_spsa: Option<Vec<f64>>,
    pub spsa_gradient: Option<Vec<f64>>,
    /// SPSA loss of the measured window.
    pub loss_measured: f64,
    pub energy: EnergyReport,
    pub deployed: bool,
    pub rollout_failures: usize,
    pub notes: Vec<String>,
    /// Filled in once the following window has been driven.
    pub post_deployment: Option<PostDeploymentCheck>,
}

/// Rollout callback: `(stream, θ) ↦ h`, `None` on failure. Calls with the
/// same stream id see the same plant draw and noise.
pub trait RolloutFn: FnMut(usize, &DVector<f64>) -> Option<DVector<f64>> {}
impl<F: FnMut(usize, &DVector<f64>) -> Option<DVector<f64>>> RolloutFn for F {}

/// Owns the belief and noise model across updates.
#[derive(Debug, Clone)]
pub struct Tuner {
    cfg: TunerConfig,
    kind: TunerKind,
    bounds: Bounds,
    mean_bounds: Bounds,
    theta: DVector<f64>,
    cov: DMatrix<f64>,
    c_theta: DMatrix<f64>,
    c_n: DVector<f64>,
    window: usize,
    updates: usize,
}

impl Tuner {
    /// Starts from the slots of `initial`, clipped inside the mean bounds.
    pub fn new(
        kind: TunerKind,
        cfg: TunerConfig,
        initial: &NmpcWeights,
        window: usize,
    ) -> Result<Self, TunerError> {
        cfg.validate()?;
        if window == 0 {
            return Err(TunerError::InvalidConfig("window must be positive".into()));
        }
        let p = cfg.p();
        let bounds = cfg.bounds();
        let all = initial.to_vec();
        let mean_bounds = cfg.mean_bounds();
        let theta = mean_bounds.clip(&DVector::from_fn(p, |i, _| all[cfg.slots[i]]));
        Ok(Self {
            kind,
            bounds,
            mean_bounds,
            theta,
            cov: DMatrix::identity(p, p) * cfg.p0,
            c_theta: DMatrix::identity(p, p) * cfg.c_theta_std.powi(2),
            c_n: DVector::from_element(3 * window, cfg.c_n0),
            window,
            updates: 0,
            cfg,
        })
    }

    pub fn kind(&self) -> TunerKind {
        self.kind
    }

    pub fn config(&self) -> &TunerConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn output_noise(&self) -> &DVector<f64> {
        &self.c_n
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// `base` with the tuned slots replaced by `theta`.
    pub fn apply(&self, base: &NmpcWeights, theta: &DVector<f64>) -> NmpcWeights {
        let mut all = base.to_vec();
        for (i, &s) in self.cfg.slots.iter().enumerate() {
            all[s] = theta[i];
        }
        NmpcWeights::from_slice(&all).expect("slot count matches")
    }

    /// Stream id used for a rollout.
    fn stream(&self, id: usize) -> usize {
        if self.cfg.common_random_numbers {
            0
        } else {
            id
        }
    }

    /// One update from the measured performance vector of the last window.
    /// The belief is always advanced; θ changes only if the update is
    /// deployed.
    pub fn update<R, F>(
        &mut self,
        t: f64,
        real_h: &DVector<f64>,
        state_window: &[EnergySample],
        mut rollout: F,
        rng: &mut R,
    ) -> Result<UpdateRecord, TunerError>
    where
        R: Rng + ?Sized,
        F: RolloutFn,
    {
        if real_h.len() != 3 * self.window {
            return Err(TunerError::Dimension(format!(
                "h has {} entries, expected {}",
                real_h.len(),
                3 * self.window
            )));
        }
        let p = self.cfg.p();
        let theta_before = self.theta.clone();
        let mut notes = Vec::new();
        let mut rollout_failures = 0;
        let mut c_k = None;
        let mut degenerate = false;
        let mut gain_norm = None;
        let mut delta_ukf = None;
        let mut new_cov = None;

        if self.kind.uses_ukf() {
            let sigma = sample_sigma_points(&self.theta, &self.cov, self.cfg.lambda, &self.bounds)?;
            c_k = Some(sigma.c_used);
            degenerate = sigma.degenerate;
            if degenerate {
                notes.push("sigma points collapsed onto the mean (theta on a bound)".into());
            }
            let stream = |id| self.stream(id);
            let prop = unscented_transform(&sigma, |j, th| rollout(stream(j), th), &self.c_theta);
            match prop {
                Ok(prop) => {
                    rollout_failures += prop.failed.len();
                    if !prop.failed.is_empty() {
                        notes.push(format!(
                            "sigma rollouts {:?} failed; replaced by the mean output",
                            prop.failed
                        ));
                    }
                    match measurement_update(&sigma, &prop, &self.c_n, self.cfg.max_condition) {
                        Ok(corr) => {
                            gain_norm = Some(corr.gain.norm());
                            delta_ukf = Some(-(&corr.gain * real_h));
                            new_cov = Some(corr.p_post);
                        }
                        Err(e) => notes.push(format!("filter update skipped: {e}")),
                    }
                }
                Err(e) => {
                    if let TunerError::RolloutsFailed { failed, .. } = e {
                        rollout_failures += failed;
                    }
                    notes.push(format!("filter update aborted: {e}"));
                }
            }
            self.c_n = update_output_noise(&self.c_n, real_h, self.cfg.gamma, self.cfg.c_n_floor);
        }

        let mut delta_spsa = None;
        let mut spsa_grad = None;
        if self.kind.uses_spsa() {
            let pairs = self.cfg.spsa_pairs.unwrap_or(2 * p);
            let n = self.window;
            let stream = |id| self.stream(id);
            let est = spsa_gradient(
                &self.theta,
                |i, th| {
                    let h = rollout(stream(100 + i), th)?;
                    spsa_loss(&h, n).ok()
                },
                self.cfg.spsa_c,
                &self.cfg.spsa_magnitudes,
                pairs,
                &self.bounds,
                rng,
            );
            match est {
                Ok(est) => {
                    rollout_failures += 2 * est.failed_pairs.len();
                    if !est.clipped_pairs.is_empty() {
                        notes.push(format!(
                            "SPSA pairs {:?} clipped to bounds",
                            est.clipped_pairs
                        ));
                    }
                    delta_spsa = Some(-(&est.gradient * self.cfg.spsa_a));
                    spsa_grad = Some(est.gradient);
                }
                Err(e) => {
                    rollout_failures += 2 * pairs;
                    notes.push(format!("SPSA step aborted: {e}"));
                }
            }
        }

        let candidate = match self.kind {
            TunerKind::None => self.theta.clone(),
            TunerKind::Ukf => self
                .mean_bounds
                .clip(&(&self.theta + delta_ukf.clone().unwrap_or_else(|| DVector::zeros(p)))),
            TunerKind::Spsa => self
                .mean_bounds
                .clip(&(&self.theta + delta_spsa.clone().unwrap_or_else(|| DVector::zeros(p)))),
            TunerKind::UkfSpsa => {
                if delta_ukf.is_none() != delta_spsa.is_none() {
                    notes.push("combined step fell back to a single method".into());
                }
                combined_step(
                    &self.theta,
                    delta_ukf.as_ref(),
                    delta_spsa.as_ref(),
                    &self.mean_bounds,
                )
            }
        };
        let energy = if state_window.is_empty() {
            EnergyReport {
                v_candidate: 0.0,
                v_current: 0.0,
                accepted: true,
            }
        } else {
            energy_check(
                &candidate,
                &self.theta,
                &self.cfg.slots,
                state_window,
                self.cfg.energy_floor,
            )?
        };
        let deployed = energy.accepted || !self.cfg.energy_gate;
        if let Some(cov) = new_cov {
            self.cov = cov;
        }
        if deployed {
            self.theta = candidate.clone();
        } else {
            notes.push("candidate rejected by the energy check".into());
        }
        let record = UpdateRecord {
            index: self.updates,
            t,
            kind: self.kind,
            theta_before: theta_before.iter().copied().collect(),
            theta_candidate: candidate.iter().copied().collect(),
            theta_after: self.theta.iter().copied().collect(),
            c_k,
            degenerate_sigma: degenerate,
            gain_norm,
            delta_ukf: delta_ukf.map(|d| d.iter().copied().collect()),
            delta_spsa: delta_spsa.map(|d| d.iter().copied().collect()),
            spsa_gradient: spsa_grad.map(|d| d.iter().copied().collect()),
            loss_measured: spsa_loss(real_h, self.window)?,
            energy,
            deployed,
            rollout_failures,
            notes,
            post_deployment: None,
        };
        self.updates += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(v: &[f64], w: &[f64], j: &[f64]) -> PerformanceWindow {
        PerformanceWindow {
            v_err: v.to_vec(),
            w_dev: w.to_vec(),
            j_opt: j.to_vec(),
        }
    }

    #[test]
    fn metric_examples() {
        let h = performance_metric(&window(&[0.0; 3], &[0.0; 3], &[0.0; 3]), 3, None).unwrap();
        assert_eq!(h, DVector::zeros(9));
        let h = performance_metric(&window(&[0.1; 3], &[0.0; 3], &[0.0; 3]), 3, None).unwrap();
        let expect = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(h.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15));
        let h = performance_metric(&window(&[0.0], &[0.0], &[5.0]), 1, Some(2.0)).unwrap();
        assert_eq!(h[2], 3.0);
        assert!(performance_metric(&window(&[0.0; 2], &[0.0; 2], &[0.0; 2]), 3, None).is_err());
        let h = performance_metric(
            &window(&[0.0; 3], &[0.0; 3], &[4.0, f64::NAN, 6.0]),
            3,
            None,
        )
        .unwrap();
        assert_eq!(h[7], 4.0);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(cost_activation(1.0, 2.0), 0.0);
        assert_eq!(cost_activation(3.0, 2.0), 1.0);
        let eps = 1e-12;
        assert!((cost_activation(2.0 - eps, 2.0) - cost_activation(2.0 + eps, 2.0)).abs() < 2e-12);
    }

    #[test]
    fn energy_examples() {
        let slots = [0, 4];
        let mut x = [0.0; NUM_WEIGHTS];
        x[0] = 0.5;
        x[4] = -1.0;
        let win = vec![x; 4];
        let theta = DVector::from_vec(vec![1.0, 2.0]);
        assert!(
            energy_check(&theta, &theta, &slots, &win, 1e-6)
                .unwrap()
                .accepted
        );
        let doubled = &theta * 2.0;
        let r = energy_check(&doubled, &theta, &slots, &win, 1e-6).unwrap();
        assert!(!r.accepted);
        assert!((r.v_candidate - 2.0 * r.v_current).abs() < 1e-12);
        let zeros = vec![[0.0; NUM_WEIGHTS]; 3];
        assert!(
            energy_check(&(&theta * 50.0), &theta, &slots, &zeros, 1e-6)
                .unwrap()
                .accepted
        );
        assert!(energy_check(&theta, &theta, &slots, &[], 1e-6).is_err());
        // Unit window: V = 1·0.25 + 2·1 per sample.
        assert!((energy(&theta, &slots, &win, 1e-6) - 4.0 * 2.25).abs() < 1e-12);
    }

    #[test]
    fn post_deployment_flag() {
        let slots = [0];
        let theta = DVector::from_element(1, 1.0);
        let mut a = [0.0; NUM_WEIGHTS];
        a[0] = 1.0;
        let mut b = [0.0; NUM_WEIGHTS];
        b[0] = 0.5;
        let c = post_deployment_check(&theta, &slots, &[a, a], &[b], 1e-6);
        assert!(c.non_increase && c.samples_after == 1);
        assert!(!post_deployment_check(&theta, &slots, &[b], &[a], 1e-6).non_increase);
    }

    fn linear_rollout(
        m: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> impl FnMut(usize, &DVector<f64>) -> Option<DVector<f64>> {
        move |_, th| Some(&m * th + &offset)
    }

    #[test]
    fn zero_innovation_is_a_fixed_point() {
        let n = 4;
        for kind in [TunerKind::Ukf, TunerKind::Spsa, TunerKind::UkfSpsa] {
            let mut tuner =
                Tuner::new(kind, TunerConfig::default(), &NmpcWeights::uniform(1.0), n).unwrap();
            // Loss and output independent of θ: no gradient, no innovation.
            let rollout = |_: usize, _: &DVector<f64>| Some(DVector::zeros(3 * n));
            let rec = tuner
                .update(
                    0.0,
                    &DVector::zeros(3 * n),
                    &[],
                    rollout,
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
            assert_eq!(rec.theta_after, rec.theta_before, "{kind:?}");
        }
    }

    #[test]
    fn ukf_moves_toward_zero_output() {
        // h(θ) = θ₀ − 3 on the velocity block: the filter should raise θ₀.
        let n = 2;
        let cfg = TunerConfig {
            slots: vec![0],
            c_n0: 0.1,
            ..Default::default()
        };
        let mut tuner = Tuner::new(TunerKind::Ukf, cfg, &NmpcWeights::uniform(1.0), n).unwrap();
        let m = DMatrix::from_fn(3 * n, 1, |r, _| if r < n { 1.0 } else { 0.0 });
        let off = DVector::from_fn(3 * n, |r, _| if r < n { -3.0 } else { 0.0 });
        let mut rollout = linear_rollout(m.clone(), off.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let real = &m * tuner.theta() + &off;
            tuner
                .update(0.0, &real, &[], &mut rollout, &mut rng)
                .unwrap();
        }
        assert!(
            (tuner.theta()[0] - 3.0).abs() < 0.05,
            "{}",
            tuner.theta()[0]
        );
    }

    #[test]
    fn mean_kept_off_the_bound() {
        // Output keeps pushing θ₀ down; it stops at the margin and the next
        // sigma set still spreads.
        let n = 2;
        let cfg = TunerConfig {
            slots: vec![0],
            c_n0: 0.1,
            ..Default::default()
        };
        let floor = cfg.bound_low + cfg.mean_margin;
        let mut tuner = Tuner::new(TunerKind::Ukf, cfg, &NmpcWeights::uniform(1.0), n).unwrap();
        let m = DMatrix::from_fn(3 * n, 1, |r, _| if r < n { 1.0 } else { 0.0 });
        let mut rollout = linear_rollout(m.clone(), DVector::zeros(3 * n));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = None;
        for _ in 0..10 {
            let real = &m * tuner.theta() + DVector::from_element(3 * n, 5.0);
            last = Some(
                tuner
                    .update(0.0, &real, &[], &mut rollout, &mut rng)
                    .unwrap(),
            );
        }
        assert_eq!(tuner.theta()[0], floor);
        let rec = last.unwrap();
        assert!(!rec.degenerate_sigma && rec.c_k.unwrap() > 0.0);
    }

    #[test]
    fn energy_gate_blocks_increase() {
        let n = 2;
        let cfg = TunerConfig {
            slots: vec![0],
            c_n0: 0.1,
            energy_gate: true,
            ..Default::default()
        };
        let mut tuner = Tuner::new(TunerKind::Ukf, cfg, &NmpcWeights::uniform(1.0), n).unwrap();
        let m = DMatrix::from_fn(3 * n, 1, |r, _| if r < n { 1.0 } else { 0.0 });
        let off = DVector::from_fn(3 * n, |r, _| if r < n { -3.0 } else { 0.0 });
        let real = &m * tuner.theta() + &off;
        let mut x = [0.0; NUM_WEIGHTS];
        x[0] = 1.0;
        let rec = tuner
            .update(
                0.0,
                &real,
                &[x; 2],
                linear_rollout(m, off),
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert!(!rec.energy.accepted && !rec.deployed);
        assert_eq!(tuner.theta()[0], 1.0);
        assert!(tuner.covariance()[(0, 0)] < 1.0);
    }

    #[test]
    fn record_serializes() {
        let n = 1;
        let mut tuner = Tuner::new(
            TunerKind::UkfSpsa,
            TunerConfig::default(),
            &NmpcWeights::uniform(1.0),
            n,
        )
        .unwrap();
        let rec = tuner
            .update(
                3.0,
                &DVector::from_element(3, 0.5),
                &[],
                |_, th: &DVector<f64>| Some(DVector::from_element(3, th.sum())),
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: UpdateRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn belief_stays_psd_and_in_bounds(seed in 0u64..10_000) {
            let n = 3;
            let cfg = TunerConfig { slots: vec![0, 4, 6], ..Default::default() };
            let mut tuner = Tuner::new(TunerKind::UkfSpsa, cfg, &NmpcWeights::uniform(1.0), n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(3 * n, 3, |_, _| rng.random_range(-2.0..2.0));
            for k in 0..50 {
                let q = DMatrix::from_fn(3 * n, 3, |_, _| rng.random_range(-0.2..0.2));
                let roll = |_: usize, th: &DVector<f64>| Some(&m * th + (&q * th).map(|v| v * v));
                let real = DVector::from_fn(3 * n, |_, _| rng.random_range(-5.0..5.0));
                let mut x = [0.0; NUM_WEIGHTS];
                x[0] = k as f64;
                let rec = tuner.update(k as f64, &real, &[x], roll, &mut rng).unwrap();
                let cov = tuner.covariance();
                prop_assert!((cov - cov.transpose()).amax() < 1e-12);
                prop_assert!(cov.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
                prop_assert!(tuner.config().bounds().contains(tuner.theta()));
                prop_assert!(rec.theta_candidate.iter().all(|v| (0.1..=100.0).contains(v)));
            }
        }
    }
}
