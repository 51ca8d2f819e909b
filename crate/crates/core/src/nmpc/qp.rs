//! Dense strictly convex QP solver (Goldfarb–Idnani dual active-set method).
//!
//! Solves
//!
//! ```text
//!     minimize    ½ zᵀ H z + gᵀ z
//!     subject to  A_eq z  = b_eq
//!                 lo ≤ C z ≤ hi
//!                 lb ≤ z   ≤ ub
//! ```
//!
//! Infinite bounds are skipped. Every finite one-sided bound gets a stable
//! [`ConstraintId`], so an active set returned by one solve can seed the next
//! solve of a problem with the same structure.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration limit {0} exceeded")]
    MaxIterations(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Index into the problem's list of finite one-sided constraints.
pub type ConstraintId = usize;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
    pub lower_bounds: DVector<f64>,
    pub upper_bounds: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n`; fill in constraints afterwards.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
            lower_bounds: DVector::from_element(n, f64::NEG_INFINITY),
            upper_bounds: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lower_bounds = lb;
        self.upper_bounds = ub;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(
        mut self,
        c: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Self {
        self.ineq_matrix = c;
        self.ineq_lower = lo;
        self.ineq_upper = hi;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let ok = self.hessian.shape() == (n, n)
            && self.eq_matrix.ncols() == n
            && self.eq_matrix.nrows() == self.eq_rhs.len()
            && self.ineq_matrix.ncols() == n
            && self.ineq_matrix.nrows() == self.ineq_lower.len()
            && self.ineq_matrix.nrows() == self.ineq_upper.len()
            && self.lower_bounds.len() == n
            && self.upper_bounds.len() == n;
        if ok {
            Ok(())
        } else {
            Err(QpError::Dimension(format!(
                "inconsistent shapes for n = {n}"
            )))
        }
    }

    /// Finite one-sided constraints in canonical order: equalities, bound
    /// lower/upper, general lower/upper.
    pub fn constraints(&self) -> Vec<Constraint> {
        let mut out = Vec::new();
        for i in 0..self.eq_rhs.len() {
            out.push(Constraint {
                kind: Kind::Equality(i),
                sign: 1.0,
                rhs: self.eq_rhs[i],
            });
        }
        for j in 0..self.dim() {
            if self.lower_bounds[j].is_finite() {
                out.push(Constraint {
                    kind: Kind::Bound(j),
                    sign: 1.0,
                    rhs: self.lower_bounds[j],
                });
            }
            if self.upper_bounds[j].is_finite() {
                out.push(Constraint {
                    kind: Kind::Bound(j),
                    sign: -1.0,
                    rhs: -self.upper_bounds[j],
                });
            }
        }
        for i in 0..self.ineq_lower.len() {
            if self.ineq_lower[i].is_finite() {
                out.push(Constraint {
                    kind: Kind::General(i),
                    sign: 1.0,
                    rhs: self.ineq_lower[i],
                });
            }
            if self.ineq_upper[i].is_finite() {
                out.push(Constraint {
                    kind: Kind::General(i),
                    sign: -1.0,
                    rhs: -self.ineq_upper[i],
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Equality(usize),
    Bound(usize),
    General(usize),
}

/// `sign · rowᵀ z ≥ rhs` (or `=` for equalities).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraint {
    kind: Kind,
    sign: f64,
    rhs: f64,
}

impl Constraint {
    pub fn is_equality(&self) -> bool {
        matches!(self.kind, Kind::Equality(_))
    }

    fn value(&self, p: &QpProblem, z: &DVector<f64>) -> f64 {
        let raw = match self.kind {
            Kind::Equality(i) => p.eq_matrix.row(i).transpose().dot(z),
            Kind::Bound(j) => z[j],
            Kind::General(i) => p.ineq_matrix.row(i).transpose().dot(z),
        };
        self.sign * raw
    }

    /// Slack `nᵀz − b`; negative means violated.
    pub fn slack(&self, p: &QpProblem, z: &DVector<f64>) -> f64 {
        self.value(p, z) - self.rhs
    }

    pub fn normal(&self, p: &QpProblem) -> DVector<f64> {
        let n = p.dim();
        match self.kind {
            Kind::Equality(i) => p.eq_matrix.row(i).transpose() * self.sign,
            Kind::Bound(j) => {
                let mut e = DVector::zeros(n);
                e[j] = self.sign;
                e
            }
            Kind::General(i) => p.ineq_matrix.row(i).transpose() * self.sign,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    /// Feasibility tolerance on every constraint.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    /// Active constraint ids with their (non-negative for inequalities)
    /// multipliers.
    pub active: Vec<(ConstraintId, f64)>,
    pub iterations: usize,
    pub objective: f64,
}

impl QpSolution {
    pub fn active_ids(&self) -> Vec<ConstraintId> {
        self.active.iter().map(|(id, _)| *id).collect()
    }
}

/// Rotation `(c, s)` with `c·a + s·b = hypot(a, b)` and `−s·a + c·b = 0`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let a = m[(row, i)];
        let b = m[(row, j)];
        m[(row, i)] = c * a + s * b;
        m[(row, j)] = -s * a + c * b;
    }
}

struct Factor {
    /// Columns 0..q span the active normals (via `R`), the rest their
    /// H-orthogonal complement.
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    /// Adds the column whose transformed normal is `d = Jᵀn`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.q;
        for k in (q + 1..n).rev() {
            let (c, s, h) = givens(d[k - 1], d[k]);
            if s == 0.0 {
                continue;
            }
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.q += 1;
    }

    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for k in l..q - 1 {
            let (c, s, h) = givens(self.r[(k, k)], self.r[(k + 1, k)]);
            if s == 0.0 {
                continue;
            }
            self.r[(k, k)] = h;
            self.r[(k + 1, k)] = 0.0;
            for col in k + 1..q - 1 {
                let a = self.r[(k, col)];
                let b = self.r[(k + 1, col)];
                self.r[(k, col)] = c * a + s * b;
                self.r[(k + 1, col)] = -s * a + c * b;
            }
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
        self.q -= 1;
    }

    /// Solves `R[0..q, 0..q] r = d[0..q]`.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q;
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn primal_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let n = d.len();
        let mut z = DVector::zeros(n);
        for k in self.q..n {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        z
    }
}

/// Solves the QP. Constraints listed in `warm` are tried first when they are
/// violated, which shortens the solve when the active set barely changes.
pub fn qp_solve(
    problem: &QpProblem,
    settings: &QpSettings,
    warm: &[ConstraintId],
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let n = problem.dim();
    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut fac = Factor {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut x = -chol.solve(&problem.gradient);

    let cons = problem.constraints();
    let normals: Vec<DVector<f64>> = cons.iter().map(|c| c.normal(problem)).collect();
    let mut is_active = vec![false; cons.len()];
    let mut is_warm = vec![false; cons.len()];
    for &id in warm {
        if id < cons.len() {
            is_warm[id] = true;
        }
    }
    let mut active: Vec<ConstraintId> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let tol = settings.tol;
    let mut iterations = 0usize;

    loop {
        // Pick the next constraint: equalities first, then warm, then the
        // most violated.
        let mut pick: Option<(ConstraintId, f64)> = None;
        let mut pick_warm: Option<(ConstraintId, f64)> = None;
        for (id, c) in cons.iter().enumerate() {
            if is_active[id] {
                continue;
            }
            let s = c.slack(problem, &x);
            if c.is_equality() {
                pick = Some((id, s));
                pick_warm = None;
                break;
            }
            let scale = 1.0 + c.rhs.abs();
            if s < -tol * scale {
                if is_warm[id] && pick_warm.is_none_or(|(_, v)| s < v) {
                    pick_warm = Some((id, s));
                }
                if pick.is_none_or(|(_, v)| s < v) {
                    pick = Some((id, s));
                }
            }
        }
        let Some((p, mut slack)) = pick_warm.or(pick) else {
            break;
        };
        let mut np = normals[p].clone();
        let mut rhs_p = cons[p].rhs;
        if cons[p].is_equality() && slack > 0.0 {
            np = -np;
            rhs_p = -rhs_p;
            slack = -slack;
        }
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iters {
                return Err(QpError::MaxIterations(settings.max_iters));
            }
            let d = fac.j.tr_mul(&np);
            let z = fac.primal_direction(&d);
            let r = fac.dual_direction(&d);

            // Largest dual step keeping active inequality multipliers ≥ 0.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 && !cons[active[k]].is_equality() {
                    let ratio = mult[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.norm() <= 1e-12 * np.norm().max(1.0) || zn <= 0.0 {
                f64::INFINITY
            } else {
                -slack / zn
            };

            if !t1.is_finite() && !t2.is_finite() {
                if cons[p].is_equality() && slack.abs() <= tol * (1.0 + cons[p].rhs.abs()) {
                    // Redundant equality already satisfied.
                    is_active[p] = true;
                    break;
                }
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                for (m, rk) in mult.iter_mut().zip(&r) {
                    *m -= t1 * rk;
                }
                u_p += t1;
                let k = drop_at.expect("finite t1 has an index");
                is_active[active[k]] = false;
                active.remove(k);
                mult.remove(k);
                fac.drop(k);
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (m, rk) in mult.iter_mut().zip(&r) {
                *m -= t * rk;
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                mult.push(u_p);
                is_active[p] = true;
                fac.add(d);
                break;
            }
            let k = drop_at.expect("partial step has a blocking constraint");
            is_active[active[k]] = false;
            active.remove(k);
            mult.remove(k);
            fac.drop(k);
            slack = np.dot(&x) - rhs_p;
        }
    }

    let objective = problem.objective(&x);
    Ok(QpSolution {
        primal: x,
        active: active.into_iter().zip(mult).collect(),
        iterations,
        objective,
    })
}

/// Largest constraint violation and stationarity residual of a solution.
pub fn kkt_residuals(problem: &QpProblem, sol: &QpSolution) -> (f64, f64) {
    let cons = problem.constraints();
    let mut viol: f64 = 0.0;
    for c in &cons {
        let s = c.slack(problem, &sol.primal);
        viol = viol.max(if c.is_equality() {
            s.abs()
        } else {
            (-s).max(0.0)
        });
    }
    let mut grad = &problem.hessian * &sol.primal + &problem.gradient;
    for &(id, m) in &sol.active {
        grad.axpy(-m, &cons[id].normal(problem), 1.0);
    }
    (viol, grad.amax())
}
