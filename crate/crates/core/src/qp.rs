//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀPx + qᵀx
//! subject to  Ax = b,  Gx ≤ h
//! ```
//!
//! with an operator-splitting iteration on the augmented system (the OSQP
//! scheme, run on dense matrices) followed by a polish step that solves the
//! equality-constrained KKT system on the active set the iteration detected.
//! A solution is reported `Optimal` only when the KKT residuals of the
//! returned primal/dual pair are all within the requested tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20_000;

/// Iterations after which the infeasibility certificate is tested.
const INFEASIBILITY_WARMUP: usize = 1_000;
const CHECK_EVERY: usize = 10;
/// ADMM iterations before the active-set fallback is tried.
const FALLBACK_AFTER: usize = 640;
const RHO_UPDATE_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let m = q.len();
        Self {
            p,
            q,
            a: DMatrix::zeros(0, m),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, m),
            h: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    fn check_dims(&self) -> Result<()> {
        let m = self.dim();
        let bad = |what: &str| Err(Error::DimensionMismatch(what.to_owned()));
        if self.p.shape() != (m, m) {
            return bad("P must be m x m with m = len(q)");
        }
        if self.a.ncols() != m || self.a.nrows() != self.b.len() {
            return bad("A must be len(b) x m");
        }
        if self.g.ncols() != m || self.g.nrows() != self.h.len() {
            return bad("G must be len(h) x m");
        }
        Ok(())
    }

    /// Dimension, symmetry and positive-semidefiniteness checks.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        let all_finite = self
            .p
            .iter()
            .chain(self.q.iter())
            .chain(self.a.iter())
            .chain(self.b.iter())
            .chain(self.g.iter())
            .chain(self.h.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidArgument("QP data contains non-finite values".into()));
        }
        let m = self.dim();
        if m == 0 {
            return Ok(());
        }
        let scale = self.p.abs().max().max(1.0);
        let asym = (&self.p - self.p.transpose()).abs().max();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = (&self.p + self.p.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if min_eig < -1e-10 * scale {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Infinity-norm KKT residuals of a primal/dual pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub primal_eq_residual: f64,
    pub primal_ineq_violation: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
    /// Largest negative part of the inequality multipliers.
    pub dual_sign_violation: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.primal_eq_residual
            .max(self.primal_ineq_violation)
            .max(self.dual_residual)
            .max(self.complementarity)
            .max(self.dual_sign_violation)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }

    /// Componentwise maximum of two reports.
    pub fn merge(&self, other: &KktReport) -> KktReport {
        KktReport {
            primal_eq_residual: self.primal_eq_residual.max(other.primal_eq_residual),
            primal_ineq_violation: self.primal_ineq_violation.max(other.primal_ineq_violation),
            dual_residual: self.dual_residual.max(other.dual_residual),
            complementarity: self.complementarity.max(other.complementarity),
            dual_sign_violation: self.dual_sign_violation.max(other.dual_sign_violation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    /// Inequality multipliers, nonnegative at a certified optimum.
    pub z_ineq: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktReport,
    pub objective: f64,
    /// Human-readable diagnostic; carries the certificate for `Infeasible`.
    pub message: String,
}

impl QpSolution {
    /// Converts a non-optimal status into an error.
    pub fn into_optimal(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            status => Err(Error::Qp {
                status,
                message: self.message,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial step size for the inequality rows; equality rows use 1e3 times this.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub verbose: bool,
    pub initial_x: Option<DVector<f64>>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            verbose: false,
            initial_x: None,
        }
    }
}

pub fn solve_qp(prob: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    };
    solve_qp_with(prob, &settings)
}

/// Residuals of `(x, y_eq, z_ineq)` for `prob`.
pub fn check_kkt(prob: &QpProblem, sol: &QpSolution) -> Result<KktReport> {
    prob.check_dims()?;
    if sol.x.len() != prob.dim() || sol.y_eq.len() != prob.n_eq() || sol.z_ineq.len() != prob.n_ineq() {
        return Err(Error::DimensionMismatch(
            "solution vectors do not match the problem".into(),
        ));
    }
    Ok(kkt_residuals(prob, &sol.x, &sol.y_eq, &sol.z_ineq))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn kkt_residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> KktReport {
    let stationarity = &prob.p * x + &prob.q + prob.a.tr_mul(y) + prob.g.tr_mul(z);
    let eq = &prob.a * x - &prob.b;
    let slack = &prob.h - &prob.g * x;
    let mut ineq = 0.0f64;
    let mut comp = 0.0f64;
    let mut sign = 0.0f64;
    for i in 0..slack.len() {
        ineq = ineq.max((-slack[i]).max(0.0));
        comp = comp.max((z[i] * slack[i]).abs());
        sign = sign.max((-z[i]).max(0.0));
    }
    KktReport {
        primal_eq_residual: inf_norm(&eq),
        primal_ineq_violation: ineq,
        dual_residual: inf_norm(&stationarity),
        complementarity: comp,
        dual_sign_violation: sign,
    }
}

/// Stacked constraint rows `l ≤ Cx ≤ u`: equalities first, then inequalities.
struct Stacked {
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    n_eq: usize,
}

impl Stacked {
    fn new(prob: &QpProblem) -> Self {
        let (me, mi, m) = (prob.n_eq(), prob.n_ineq(), prob.dim());
        let mut c = DMatrix::zeros(me + mi, m);
        c.rows_mut(0, me).copy_from(&prob.a);
        c.rows_mut(me, mi).copy_from(&prob.g);
        let mut l = DVector::from_element(me + mi, f64::NEG_INFINITY);
        let mut u = DVector::zeros(me + mi);
        l.rows_mut(0, me).copy_from(&prob.b);
        u.rows_mut(0, me).copy_from(&prob.b);
        u.rows_mut(me, mi).copy_from(&prob.h);
        Self { c, l, u, n_eq: me }
    }

    fn rows(&self) -> usize {
        self.l.len()
    }
}

struct Admm<'a> {
    prob: &'a QpProblem,
    st: Stacked,
    settings: &'a QpSettings,
    rho: DVector<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

impl<'a> Admm<'a> {
    fn new(prob: &'a QpProblem, settings: &'a QpSettings) -> Result<Self> {
        let st = Stacked::new(prob);
        let rows = st.rows();
        let rho = DVector::from_fn(rows, |i, _| if i < st.n_eq { 1e3 * settings.rho } else { settings.rho });
        let factor = factorize(prob, &st, &rho, settings.sigma)?;
        let x = match &settings.initial_x {
            Some(x0) if x0.len() == prob.dim() => x0.clone(),
            _ => DVector::zeros(prob.dim()),
        };
        let z = clip(&(&st.c * &x), &st.l, &st.u);
        let y = DVector::zeros(rows);
        Ok(Self {
            prob,
            st,
            settings,
            rho,
            factor,
            x,
            z,
            y,
        })
    }

    fn step(&mut self) {
        let s = self.settings;
        let rhs = &self.x * s.sigma - &self.prob.q + self.st.c.tr_mul(&(self.rho.component_mul(&self.z) - &self.y));
        let x_tilde = self.factor.solve(&rhs);
        let z_tilde = &self.st.c * &x_tilde;
        self.x = &x_tilde * s.alpha + &self.x * (1.0 - s.alpha);
        let z_relaxed = &z_tilde * s.alpha + &self.z * (1.0 - s.alpha);
        let z_new = clip(&(&z_relaxed + self.y.component_div(&self.rho)), &self.st.l, &self.st.u);
        self.y += self.rho.component_mul(&(&z_relaxed - &z_new));
        self.z = z_new;
    }

    /// (primal residual, dual residual, primal scale, dual scale)
    fn residuals(&self) -> (f64, f64, f64, f64) {
        let cx = &self.st.c * &self.x;
        let px = &self.prob.p * &self.x;
        let cty = self.st.c.tr_mul(&self.y);
        let rp = inf_norm(&(&cx - &self.z));
        let rd = inf_norm(&(&px + &self.prob.q + &cty));
        let sp = inf_norm(&cx).max(inf_norm(&self.z));
        let sd = inf_norm(&px).max(inf_norm(&cty)).max(inf_norm(&self.prob.q));
        (rp, rd, sp, sd)
    }

    fn update_rho(&mut self) -> Result<()> {
        let (rp, rd, sp, sd) = self.residuals();
        if self.st.rows() == 0 {
            return Ok(());
        }
        let num = rp / (sp + 1e-30);
        let den = rd / (sd + 1e-30);
        if num <= 0.0 || den <= 0.0 {
            return Ok(());
        }
        let ratio = (num / den).sqrt();
        if !(0.2..=5.0).contains(&ratio) {
            let base = (self.rho[self.rho.len() - 1] * ratio).clamp(1e-6, 1e6);
            for i in 0..self.rho.len() {
                self.rho[i] = if i < self.st.n_eq { 1e3 * base } else { base };
            }
            self.factor = factorize(self.prob, &self.st, &self.rho, self.settings.sigma)?;
        }
        Ok(())
    }

    /// Primal infeasibility certificate from the last dual increment.
    fn infeasibility_certificate(&self, dy: &DVector<f64>) -> Option<String> {
        let norm = inf_norm(dy);
        if norm < 1e-10 {
            return None;
        }
        let eps = 1e-6 * norm;
        let cty = inf_norm(&self.st.c.tr_mul(dy));
        if cty > eps {
            return None;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let d = dy[i];
            if d > 0.0 {
                support += self.st.u[i] * d;
            } else if d < 0.0 {
                if self.st.l[i].is_infinite() {
                    if d < -eps {
                        return None;
                    }
                } else {
                    support += self.st.l[i] * d;
                }
            }
        }
        if support < -eps {
            Some(format!(
                "primal infeasibility certificate: |C^T dy| = {cty:.3e}, support value = {support:.3e} < 0 (|dy| = {norm:.3e})"
            ))
        } else {
            None
        }
    }
}

fn clip(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

fn factorize(
    prob: &QpProblem,
    st: &Stacked,
    rho: &DVector<f64>,
    sigma: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let m = prob.dim();
    let mut scaled = st.c.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let k = &prob.p + DMatrix::identity(m, m) * sigma + st.c.tr_mul(&scaled);
    k.cholesky().ok_or_else(|| Error::Qp {
        status: QpStatus::MaxIter,
        message: "ADMM system matrix is not positive definite".into(),
    })
}

/// Solves the KKT system with the rows in `active` held at their bounds.
/// Returns `(x, multipliers for active rows)`.
fn solve_active_kkt(prob: &QpProblem, st: &Stacked, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = prob.dim();
    let k = active.len();
    let size = m + k;
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, 0), (m, m)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(size);
    rhs.rows_mut(0, m).copy_from(&(-&prob.q));
    for (r, &i) in active.iter().enumerate() {
        for j in 0..m {
            let v = st.c[(i, j)];
            kkt[(m + r, j)] = v;
            kkt[(j, m + r)] = v;
        }
        rhs[m + r] = st.u[i];
    }
    let scale = kkt.abs().max().max(1.0);
    let rhs_scale = 1.0 + inf_norm(&rhs);
    if let Some(sol) = refined_solve(&kkt, &kkt.clone().full_piv_lu(), &rhs, scale, rhs_scale) {
        if inf_norm(&(&rhs - &kkt * &sol)) <= 1e-12 * rhs_scale * scale {
            let x = sol.rows(0, m).into_owned();
            let lam = sol.rows(m, k).into_owned();
            return Some((x, lam));
        }
    }
    let delta = 1e-11 * scale;
    let mut reg = kkt.clone();
    for i in 0..m {
        reg[(i, i)] += delta;
    }
    for i in m..size {
        reg[(i, i)] -= delta;
    }
    let sol = refined_solve(&kkt, &reg.full_piv_lu(), &rhs, scale, rhs_scale)?;
    let x = sol.rows(0, m).into_owned();
    let lam = sol.rows(m, k).into_owned();
    Some((x, lam))
}

/// LU solve of `kkt·v = rhs` through a factorization of `kkt` or a nearby
/// matrix, followed by iterative refinement against `kkt` itself.
fn refined_solve(
    kkt: &DMatrix<f64>,
    lu: &nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: &DVector<f64>,
    scale: f64,
    rhs_scale: f64,
) -> Option<DVector<f64>> {
    let mut sol = lu.solve(rhs)?;
    for _ in 0..30 {
        let res = rhs - kkt * &sol;
        if inf_norm(&res) <= 1e-15 * rhs_scale * scale {
            break;
        }
        sol += lu.solve(&res)?;
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

struct Polished {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    kkt: KktReport,
}

/// Active-set refinement seeded by the ADMM iterate.
fn polish(prob: &QpProblem, st: &Stacked, z: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Option<Polished> {
    let (me, rows) = (st.n_eq, st.rows());
    let mut active: Vec<bool> = (0..rows).map(|i| i < me || (st.u[i] - z[i] < y[i])).collect();
    let change_tol = 0.5 * tol;
    let max_rounds = 2 * (rows - me) + 10;
    let mut best: Option<Polished> = None;
    for round in 0..max_rounds {
        let idx: Vec<usize> = (0..rows).filter(|&i| active[i]).collect();
        let (x, lam) = solve_active_kkt(prob, st, &idx)?;
        let mut y_full = DVector::zeros(rows);
        for (r, &i) in idx.iter().enumerate() {
            y_full[i] = lam[r];
        }
        let y_eq = y_full.rows(0, me).into_owned();
        let z_in = y_full.rows(me, rows - me).into_owned();
        let kkt = kkt_residuals(prob, &x, &y_eq, &z_in);
        let candidate = Polished {
            x: x.clone(),
            y: y_eq,
            z: z_in,
            kkt,
        };
        if kkt.within(tol) {
            return Some(candidate);
        }
        if best.as_ref().is_none_or(|b| kkt.max() < b.kkt.max()) {
            best = Some(candidate);
        }

        let cx = &st.c * &x;
        let mut worst_primal: Option<(usize, f64)> = None;
        let mut worst_dual: Option<(usize, f64)> = None;
        let mut violated = Vec::new();
        let mut negative = Vec::new();
        for i in me..rows {
            if active[i] {
                if y_full[i] < -change_tol {
                    negative.push(i);
                    if worst_dual.is_none_or(|(_, v)| y_full[i] < v) {
                        worst_dual = Some((i, y_full[i]));
                    }
                }
            } else {
                let viol = cx[i] - st.u[i];
                if viol > change_tol {
                    violated.push(i);
                    if worst_primal.is_none_or(|(_, v)| viol > v) {
                        worst_primal = Some((i, viol));
                    }
                }
            }
        }
        if violated.is_empty() && negative.is_empty() {
            // Active set is consistent but residuals are not small enough.
            break;
        }
        if round < 5 {
            for i in violated {
                active[i] = true;
            }
            for i in negative {
                active[i] = false;
            }
        } else if let Some((i, _)) = worst_dual {
            active[i] = false;
        } else if let Some((i, _)) = worst_primal {
            active[i] = true;
        }
    }
    if let Some(b) = &best {
        if let Some(p) = primal_active_set(prob, st, &b.x, tol) {
            if p.kkt.within(tol) || p.kkt.max() < b.kkt.max() {
                return Some(p);
            }
        }
    }
    best
}

/// Runs the primal active-set phase from the caller's initial point or the
/// origin, whichever is feasible.
fn active_set_from_known_points(prob: &QpProblem, st: &Stacked, settings: &QpSettings) -> Option<Polished> {
    let m = prob.dim();
    let starts = settings
        .initial_x
        .iter()
        .cloned()
        .chain(std::iter::once(DVector::zeros(m)));
    for x0 in starts {
        if x0.len() != m {
            continue;
        }
        if let Some(p) = primal_active_set(prob, st, &x0, settings.tol) {
            return Some(p);
        }
    }
    None
}

/// Linearly independent subset of `rows`, kept in order.
fn independent_rows(st: &Stacked, rows: &[usize]) -> Vec<usize> {
    let m = st.c.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for &i in rows {
        let row = st.c.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row / norm;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let r = v.norm();
        if r > 1e-9 && basis.len() < m {
            basis.push(v / r);
            kept.push(i);
        }
    }
    kept
}

/// Primal active-set iterations from a feasible point, with Bland's rule for
/// leaving rows so degenerate vertices cannot cycle.
fn primal_active_set(prob: &QpProblem, st: &Stacked, x0: &DVector<f64>, tol: f64) -> Option<Polished> {
    let (me, rows) = (st.n_eq, st.rows());
    let feas_tol = 0.5 * tol;
    let mut x = x0.clone();
    let cx = &st.c * &x;
    let scale_u = 1.0 + inf_norm(&st.u);
    for i in 0..rows {
        let viol = if i < me {
            (cx[i] - st.u[i]).abs()
        } else {
            cx[i] - st.u[i]
        };
        if viol > feas_tol * scale_u {
            return None;
        }
    }
    let tight: Vec<usize> = (0..rows)
        .filter(|&i| i < me || (st.u[i] - cx[i]).abs() <= feas_tol * scale_u)
        .collect();
    let mut work = independent_rows(st, &tight);
    let mut best: Option<Polished> = None;
    for _ in 0..(20 * rows + 100) {
        let (xw, lam) = solve_active_kkt(prob, st, &work)?;
        let d = &xw - &x;
        if inf_norm(&d) <= 1e-10 * (1.0 + inf_norm(&x)) {
            let mut y_full = DVector::zeros(rows);
            for (r, &i) in work.iter().enumerate() {
                y_full[i] = lam[r];
            }
            let y_eq = y_full.rows(0, me).into_owned();
            let z_in = y_full.rows(me, rows - me).into_owned();
            let kkt = kkt_residuals(prob, &xw, &y_eq, &z_in);
            let candidate = Polished {
                x: xw.clone(),
                y: y_eq,
                z: z_in,
                kkt,
            };
            if kkt.within(tol) {
                return Some(candidate);
            }
            if best.as_ref().is_none_or(|b| kkt.max() < b.kkt.max()) {
                best = Some(candidate);
            }
            x = xw;
            let leaving = work
                .iter()
                .enumerate()
                .filter(|&(r, &i)| i >= me && lam[r] < -feas_tol)
                .map(|(r, _)| r)
                .next();
            match leaving {
                Some(r) => {
                    work.remove(r);
                }
                None => break,
            }
            continue;
        }
        let cd = &st.c * &d;
        let cx = &st.c * &x;
        let dnorm = inf_norm(&d);
        let mut step = 1.0;
        let mut blocker = None;
        for i in me..rows {
            if work.contains(&i) || cd[i] <= 1e-14 * dnorm {
                continue;
            }
            let a = (st.u[i] - cx[i]).max(0.0) / cd[i];
            if a < step {
                step = a;
                blocker = Some(i);
            }
        }
        x += d * step;
        if let Some(i) = blocker {
            let pos = work.partition_point(|&w| w < i);
            work.insert(pos, i);
        }
    }
    best
}

pub fn solve_qp_with(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    prob.validate()?;
    if !(settings.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut admm = Admm::new(prob, settings)?;
    let me = admm.st.n_eq;
    let rows = admm.st.rows();
    let mut next_polish = 10usize;
    let mut best: Option<Polished> = None;
    let mut fallback_tried = false;

    let finish = |p: Polished, status: QpStatus, iterations: usize, message: String| QpSolution {
        objective: prob.objective(&p.x),
        x: p.x,
        y_eq: p.y,
        z_ineq: p.z,
        status,
        iterations,
        kkt: p.kkt,
        message,
    };

    for iter in 1..=settings.max_iter {
        let y_prev = if iter >= INFEASIBILITY_WARMUP && iter % CHECK_EVERY == 0 {
            Some(admm.y.clone())
        } else {
            None
        };
        admm.step();

        if let Some(y_prev) = y_prev {
            let dy = &admm.y - y_prev;
            if let Some(msg) = admm.infeasibility_certificate(&dy) {
                let y_eq = admm.y.rows(0, me).into_owned();
                let z = admm.y.rows(me, rows - me).into_owned();
                let kkt = kkt_residuals(prob, &admm.x, &y_eq, &z);
                return Ok(QpSolution {
                    objective: prob.objective(&admm.x),
                    x: admm.x.clone(),
                    y_eq,
                    z_ineq: z,
                    status: QpStatus::Infeasible,
                    iterations: iter,
                    kkt,
                    message: msg,
                });
            }
        }

        if iter % CHECK_EVERY == 0 || iter == next_polish {
            let (rp, rd, _, _) = admm.residuals();
            if settings.verbose {
                eprintln!("qp iter {iter:6}  primal {rp:.3e}  dual {rd:.3e}");
            }
            let close = rp.max(rd) <= 1e-6 * (1.0 + inf_norm(&prob.q));
            if iter >= next_polish || close {
                next_polish = 2 * next_polish.max(iter);
                if let Some(p) = polish(prob, &admm.st, &admm.z, &admm.y, settings.tol) {
                    if p.kkt.within(settings.tol) {
                        return Ok(finish(p, QpStatus::Optimal, iter, "polished".into()));
                    }
                    if best.as_ref().is_none_or(|b| p.kkt.max() < b.kkt.max()) {
                        best = Some(p);
                    }
                }
                if !fallback_tried && iter >= FALLBACK_AFTER {
                    fallback_tried = true;
                    if let Some(p) = active_set_from_known_points(prob, &admm.st, settings) {
                        if p.kkt.within(settings.tol) {
                            return Ok(finish(p, QpStatus::Optimal, iter, "active-set fallback".into()));
                        }
                    }
                }
                // The raw iterate may already be certifiable.
                let y_eq = admm.y.rows(0, me).into_owned();
                let z = admm.y.rows(me, rows - me).into_owned();
                let kkt = kkt_residuals(prob, &admm.x, &y_eq, &z);
                let raw = Polished {
                    x: admm.x.clone(),
                    y: y_eq,
                    z,
                    kkt,
                };
                if kkt.within(settings.tol) {
                    return Ok(finish(raw, QpStatus::Optimal, iter, "converged".into()));
                }
                if best.as_ref().is_none_or(|b| kkt.max() < b.kkt.max()) {
                    best = Some(raw);
                }
            }
            if settings.adaptive_rho && iter % RHO_UPDATE_EVERY == 0 {
                admm.update_rho()?;
            }
        }
    }

    let fallback = best.unwrap_or_else(|| {
        let y_eq = admm.y.rows(0, me).into_owned();
        let z = admm.y.rows(me, rows - me).into_owned();
        let kkt = kkt_residuals(prob, &admm.x, &y_eq, &z);
        Polished {
            x: admm.x.clone(),
            y: y_eq,
            z,
            kkt,
        }
    });
    let msg = format!(
        "iteration limit {} reached, best KKT residual {:.3e}",
        settings.max_iter,
        fallback.kkt.max()
    );
    Ok(finish(fallback, QpStatus::MaxIter, settings.max_iter, msg))
}
