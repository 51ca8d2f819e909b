//! Gauss–Newton SQP with multiple-shooting linearization, condensed onto the
//! input rates.

use super::qp::{qp_solve, ConstraintId, QpError, QpProblem, QpSettings};
use super::{
    augment_dynamics, split, stage_cost, terminal_cost, tracking_error, AugState, NmpcWeights,
    OcpConfig, NA, NU, NX,
};
use crate::dynamics::{ControlInput, DynamicsError, SingleTrackParams};
use crate::path::ReferencePath;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
    Failed,
}

impl SolveStatus {
    /// Whether the returned first input may be applied.
    pub fn is_usable(&self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::MaxIterations)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Augmented states `ξ_0 … ξ_N`.
    pub states: Vec<AugState>,
    /// Input rates `u̇_0 … u̇_{N−1}`.
    pub rates: Vec<[f64; NU]>,
    /// Optimal cost `J*`.
    pub cost: f64,
    pub status: SolveStatus,
    pub sqp_iters: usize,
    pub qp_iters: usize,
    /// Infinity norm of the last SQP step.
    pub step_norm: f64,
    pub active_set: Vec<ConstraintId>,
}

impl OcpSolution {
    /// Input applied over the first interval.
    pub fn first_input(&self) -> ControlInput {
        split(&self.states[1]).1
    }

    /// Shifts the trajectory one interval forward for warm starting.
    pub fn shifted(&self) -> (Vec<AugState>, Vec<[f64; NU]>) {
        let n = self.rates.len();
        let mut states: Vec<AugState> = self.states[1..].to_vec();
        states.push(self.states[n]);
        let mut rates: Vec<[f64; NU]> = self.rates[1..].to_vec();
        rates.push([0.0; NU]);
        (states, rates)
    }
}

/// Everything that defines one optimal control problem instance.
pub struct OcpInstance<'a> {
    pub x0: AugState,
    /// Reference speed per stage, `N + 1` entries.
    pub v_ref: &'a [f64],
    pub weights: &'a NmpcWeights,
    pub cfg: &'a OcpConfig,
    pub params: &'a SingleTrackParams,
    pub path: &'a ReferencePath,
}

impl OcpInstance<'_> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    fn kappa(&self, xi: &AugState) -> f64 {
        self.path.kappa_clamped(xi[3])
    }

    fn step(&self, xi: &AugState, udot: &[f64; NU], kappa: f64) -> Result<AugState, DynamicsError> {
        augment_dynamics(xi, udot, self.cfg.ts, kappa, self.params)
    }

    /// Forward simulation of a rate sequence from `x0`.
    pub fn simulate(&self, rates: &[[f64; NU]]) -> Result<Vec<AugState>, DynamicsError> {
        let mut out = Vec::with_capacity(rates.len() + 1);
        out.push(self.x0);
        for (k, ud) in rates.iter().enumerate() {
            let next = self.step(&out[k], ud, self.kappa(&out[k]))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Objective of a state/rate trajectory.
    pub fn cost(&self, states: &[AugState], rates: &[[f64; NU]]) -> f64 {
        let n = rates.len();
        let mut j = 0.0;
        for k in 0..n {
            let applied = split(&states[k + 1]).1;
            j += stage_cost(&states[k], self.v_ref[k], &applied, &rates[k], self.weights);
        }
        j + terminal_cost(
            &states[n],
            self.v_ref[n],
            self.weights,
            self.cfg.terminal_scale,
        )
    }

    /// Central-difference Jacobians of one stage.
    fn jacobians(
        &self,
        xi: &AugState,
        udot: &[f64; NU],
        kappa: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        let mut a = DMatrix::zeros(NA, NA);
        let mut b = DMatrix::zeros(NA, NU);
        for j in 0..NA {
            let h = 1e-6 * xi[j].abs().max(1.0);
            let mut p = *xi;
            let mut m = *xi;
            p[j] += h;
            m[j] -= h;
            let d = (self.step(&p, udot, kappa)? - self.step(&m, udot, kappa)?) / (2.0 * h);
            a.column_mut(j).copy_from(&d);
        }
        for j in 0..NU {
            let h = 1e-6;
            let mut p = *udot;
            let mut m = *udot;
            p[j] += h;
            m[j] -= h;
            let d = (self.step(xi, &p, kappa)? - self.step(xi, &m, kappa)?) / (2.0 * h);
            b.column_mut(j).copy_from(&d);
        }
        Ok((a, b))
    }

    /// Weights on the rows of `ξ_k` (tracking error on the state part, input
    /// cost on the input part) for `k ≥ 1`.
    fn row_weights(&self, k: usize) -> [f64; NA] {
        let n = self.n();
        let scale = if k == n { self.cfg.terminal_scale } else { 1.0 };
        let mut w = [0.0; NA];
        for i in 0..NX {
            w[i] = scale * self.weights.q[i];
        }
        w[3] = 0.0;
        w[NX..].copy_from_slice(&self.weights.r);
        w
    }

    /// Residual whose weighted square the row weights penalize.
    fn row_residual(&self, k: usize, xi: &AugState) -> [f64; NA] {
        let e = tracking_error(xi, self.v_ref[k]);
        let mut r = [0.0; NA];
        r[..NX].copy_from_slice(&e);
        r[NX] = xi[NX];
        r[NX + 1] = xi[NX + 1];
        r
    }
}

/// Condensed QP around an iterate plus the maps needed to expand its solution.
pub(crate) struct Condensed {
    pub qp: QpProblem,
    /// `Δξ_k = c_k + M_k Δz`.
    pub offsets: Vec<AugState>,
    pub sens: Vec<DMatrix<f64>>,
}

pub(crate) fn condense(
    inst: &OcpInstance<'_>,
    states: &[AugState],
    rates: &[[f64; NU]],
) -> Result<Condensed, DynamicsError> {
    let n = inst.n();
    let nz = NU * n;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    offsets.push(inst.x0 - states[0]);
    sens.push(DMatrix::zeros(NA, nz));

    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    for k in 0..n {
        for i in 0..NU {
            h[(NU * k + i, NU * k + i)] += 2.0 * inst.weights.s[i];
            g[NU * k + i] += 2.0 * inst.weights.s[i] * rates[k][i];
        }
    }

    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for k in 0..n {
        let kappa = inst.kappa(&states[k]);
        let (a, b) = inst.jacobians(&states[k], &rates[k], kappa)?;
        let defect = inst.step(&states[k], &rates[k], kappa)? - states[k + 1];
        let c_next = &a * DVector::from_column_slice(offsets[k].as_slice())
            + DVector::from_column_slice(defect.as_slice());
        let mut m_next = &a * &sens[k];
        let mut block = m_next.columns_mut(NU * k, NU);
        block += &b;
        offsets.push(AugState::from_column_slice(c_next.as_slice()));
        sens.push(m_next);

        let kk = k + 1;
        let lin = states[kk] + offsets[kk];
        let w = inst.row_weights(kk);
        let res = inst.row_residual(kk, &lin);
        let m = &sens[kk];
        let wm = DMatrix::from_fn(NA, nz, |r, c| w[r] * m[(r, c)]);
        h.gemm_tr(2.0, m, &wm, 1.0);
        let wres = DVector::from_fn(NA, |r, _| w[r] * res[r]);
        g.gemv_tr(2.0, m, &wres, 1.0);

        // (stage, row, lower, upper) on the linearized ξ_kk
        rows.push((kk, 0, inst.cfg.vx_min - lin[0], inst.cfg.vx_max - lin[0]));
        if inst.cfg.track_limits {
            let pt = inst.path.point_clamped(states[kk][3]);
            rows.push((kk, 4, -pt.w_right - lin[4], pt.w_left - lin[4]));
        }
        for i in 0..NU {
            rows.push((
                kk,
                NX + i,
                inst.cfg.u_min[i] - lin[NX + i],
                inst.cfg.u_max[i] - lin[NX + i],
            ));
        }
    }

    let mut c = DMatrix::zeros(rows.len(), nz);
    let mut lo = DVector::zeros(rows.len());
    let mut hi = DVector::zeros(rows.len());
    for (r, &(k, i, l, u)) in rows.iter().enumerate() {
        c.row_mut(r).copy_from(&sens[k].row(i));
        lo[r] = l;
        hi[r] = u;
    }
    let lb = DVector::from_fn(nz, |j, _| inst.cfg.udot_min[j % NU] - rates[j / NU][j % NU]);
    let ub = DVector::from_fn(nz, |j, _| inst.cfg.udot_max[j % NU] - rates[j / NU][j % NU]);
    let qp = QpProblem::new(h, g)
        .with_bounds(lb, ub)
        .with_inequalities(c, lo, hi);
    Ok(Condensed { qp, offsets, sens })
}

/// Initial guess for [`solve_sqp`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub states: Vec<AugState>,
    pub rates: Vec<[f64; NU]>,
    pub active_set: Vec<ConstraintId>,
}

/// Solves the OCP from `warm` (or from a zero-rate forward simulation).
pub fn solve_sqp(inst: &OcpInstance<'_>, warm: Option<&WarmStart>) -> OcpSolution {
    let n = inst.n();
    let failed = |states: Vec<AugState>, rates: Vec<[f64; NU]>, status, it, qp_it| OcpSolution {
        states,
        rates,
        cost: f64::NAN,
        status,
        sqp_iters: it,
        qp_iters: qp_it,
        step_norm: f64::NAN,
        active_set: Vec::new(),
    };

    let (mut states, mut rates, mut active) = match warm {
        Some(w) if w.states.len() == n + 1 && w.rates.len() == n => {
            (w.states.clone(), w.rates.clone(), w.active_set.clone())
        }
        _ => {
            let rates = vec![[0.0; NU]; n];
            match inst.simulate(&rates) {
                Ok(s) => (s, rates, Vec::new()),
                Err(_) => return failed(vec![inst.x0; n + 1], rates, SolveStatus::Failed, 0, 0),
            }
        }
    };
    states[0] = inst.x0;

    let settings = QpSettings {
        tol: inst.cfg.qp_tol,
        max_iters: inst.cfg.qp_max_iters,
    };
    let mut status = SolveStatus::MaxIterations;
    let mut qp_iters = 0;
    let mut sqp_iters = 0;
    let mut step_norm = f64::INFINITY;
    while sqp_iters < inst.cfg.sqp_max_iters {
        sqp_iters += 1;
        let cond = match condense(inst, &states, &rates) {
            Ok(c) => c,
            Err(_) => return failed(states, rates, SolveStatus::Failed, sqp_iters, qp_iters),
        };
        let sol = match qp_solve(&cond.qp, &settings, &active) {
            Ok(s) => s,
            Err(QpError::Infeasible) => {
                return failed(states, rates, SolveStatus::Infeasible, sqp_iters, qp_iters)
            }
            Err(_) => return failed(states, rates, SolveStatus::Failed, sqp_iters, qp_iters),
        };
        qp_iters += sol.iterations;
        active = sol.active_ids();
        let dz = &sol.primal;
        let alpha = (inst.cfg.step_cap / dz.amax().max(1e-300)).min(1.0);
        let mut norm = alpha * dz.amax();
        for k in 0..=n {
            let dxi = &cond.sens[k] * dz + DVector::from_column_slice(cond.offsets[k].as_slice());
            let dxi = AugState::from_column_slice(dxi.as_slice()) * alpha;
            norm = norm.max(dxi.amax());
            states[k] += dxi;
        }
        for k in 0..n {
            for i in 0..NU {
                rates[k][i] += alpha * dz[NU * k + i];
            }
        }
        states[0] = inst.x0;
        step_norm = norm;
        if norm < inst.cfg.sqp_tol {
            status = SolveStatus::Converged;
            break;
        }
    }

    // Report the cost of the rates actually found, integrated without defects.
    let cost = match inst.simulate(&rates) {
        Ok(traj) => inst.cost(&traj, &rates),
        Err(_) => inst.cost(&states, &rates),
    };
    if !cost.is_finite() {
        return failed(states, rates, SolveStatus::Failed, sqp_iters, qp_iters);
    }
    OcpSolution {
        states,
        rates,
        cost,
        status,
        sqp_iters,
        qp_iters,
        step_norm,
        active_set: active,
    }
}
