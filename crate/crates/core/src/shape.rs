//! Univariate shape-constrained least squares with a sup-norm penalty.
//!
//! For a coordinate with values `x` and a target `r`, fits
//!
//! ```text
//! minimize  (1/2n) ‖r − f‖² + λ ‖f‖∞
//! over      centered f that are convex (or concave) in x
//! ```
//!
//! Two formulations are available and solve the same problem:
//!
//! * [`Formulation::BetaForm`] poses the full QP in fitted values `f` and
//!   segment slopes `β` (interpolation equalities plus monotone slopes) and
//!   hands it to [`crate::qp`].
//! * [`Formulation::SecondDerivForm`] parameterizes `f = Δ̄ d` by slope
//!   increments `d ≥ 0` (hinge functions at the sorted sample points) and
//!   solves it by generating knots: a small QP over the current knot set is
//!   solved with [`crate::qp`], then reduced costs of all remaining hinges
//!   certify optimality or pick the next knots. Fits are piecewise linear with
//!   few knots, so the restricted problems stay small.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Permutation;
use crate::qp::{self, KktReport, QpProblem, QpSettings};
use crate::{Error, Result};

/// Components with sup-norm at or below this are treated as zero.
pub const ZERO_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Convex,
    Concave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formulation {
    BetaForm,
    SecondDerivForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: f64,
    pub formulation: Formulation,
    pub qp_tol: f64,
    pub max_iter: usize,
}

impl FitOptions {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn with_formulation(mut self, formulation: Formulation) -> Self {
        self.formulation = formulation;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda
            )));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::InvalidArgument("qp_tol must be positive".into()));
        }
        Ok(())
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            formulation: Formulation::SecondDerivForm,
            qp_tol: qp::DEFAULT_TOL,
            max_iter: qp::DEFAULT_MAX_ITER,
        }
    }
}

/// One fitted shape-constrained component.
///
/// `beta[i]` is the slope between the i-th and (i+1)-th smallest sample and
/// `d` holds its increments (`d[0] = beta[0]`, `d[i] = beta[i] - beta[i-1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateFit {
    pub coordinate: usize,
    pub perm: Permutation,
    pub x_sorted: Vec<f64>,
    /// Fitted values in sample order.
    pub f: Vec<f64>,
    pub beta: Vec<f64>,
    pub d: Vec<f64>,
    pub shape: Shape,
    pub lambda: f64,
    pub sup_norm: f64,
    /// `(1/2n)‖r − f‖² + λ‖f‖∞` for the target the fit was computed from.
    pub objective: f64,
    pub kkt: KktReport,
}

impl UnivariateFit {
    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn f_sorted(&self) -> Vec<f64> {
        self.perm.apply(&self.f)
    }

    pub fn is_zero(&self, threshold: f64) -> bool {
        self.sup_norm <= threshold
    }

    pub fn evaluate(&self, x_new: f64) -> f64 {
        evaluate_component(self, x_new)
    }

    fn zero(col: &SortedColumn, r: &[f64], shape: Shape, lambda: f64) -> Self {
        let n = col.xs.len();
        let f = vec![0.0; n];
        let objective = objective_value(r, &f, lambda);
        Self {
            coordinate: col.perm.coordinate,
            perm: col.perm.clone(),
            x_sorted: col.xs.clone(),
            f,
            beta: vec![0.0; n - 1],
            d: vec![0.0; n - 1],
            shape,
            lambda,
            sup_norm: 0.0,
            objective,
            kkt: KktReport::default(),
        }
    }

    fn negated(mut self) -> Self {
        for v in self.f.iter_mut().chain(self.beta.iter_mut()).chain(self.d.iter_mut()) {
            *v = -*v;
        }
        self.shape = match self.shape {
            Shape::Convex => Shape::Concave,
            Shape::Concave => Shape::Convex,
        };
        self
    }

    /// Checks centering, interpolation, slope monotonicity and the
    /// slope/increment consistency. Returns the first violation found.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        let n = self.n();
        let fs = self.f_sorted();
        let sup = self.sup_norm.max(1.0);
        let sum: f64 = self.f.iter().sum();
        if sum.abs() > 1e-8 * n as f64 * sup {
            return Err(format!("not centered: sum = {sum:e}"));
        }
        for i in 0..n - 1 {
            let pred = fs[i] + self.beta[i] * (self.x_sorted[i + 1] - self.x_sorted[i]);
            if (fs[i + 1] - pred).abs() > tol * sup {
                return Err(format!("interpolation fails at sorted position {i}"));
            }
        }
        let sign = match self.shape {
            Shape::Convex => 1.0,
            Shape::Concave => -1.0,
        };
        for i in 1..n - 1 {
            if sign * (self.beta[i] - self.beta[i - 1]) < -1e-10 * (1.0 + self.beta[i].abs()) {
                return Err(format!("slopes violate shape at sorted position {i}"));
            }
            if (self.d[i] - (self.beta[i] - self.beta[i - 1])).abs() > tol * (1.0 + self.beta[i].abs()) {
                return Err(format!("increment inconsistent at sorted position {i}"));
            }
        }
        if (self.d[0] - self.beta[0]).abs() > tol * (1.0 + self.beta[0].abs()) {
            return Err("first increment must equal first slope".into());
        }
        Ok(())
    }
}

/// `(1/2n)‖r − f‖² + λ‖f‖∞`.
pub fn objective_value(r: &[f64], f: &[f64], lambda: f64) -> f64 {
    let n = r.len() as f64;
    let rss: f64 = r.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    rss / (2.0 * n) + lambda * sup
}

/// A coordinate's sort order and sorted values, computed once and reused.
#[derive(Debug, Clone)]
pub(crate) struct SortedColumn {
    pub perm: Permutation,
    pub xs: Vec<f64>,
}

impl SortedColumn {
    pub fn new(x: &[f64], coordinate: usize) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariate values must be finite".into()));
        }
        let perm = Permutation::sorting(x, coordinate);
        let xs = perm.apply(x);
        Ok(Self { perm, xs })
    }

    fn is_constant(&self) -> bool {
        self.xs[self.xs.len() - 1] == self.xs[0]
    }
}

fn check_target(x: &[f64], r: &[f64]) -> Result<()> {
    if x.len() != r.len() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, r has {}",
            x.len(),
            r.len()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("target values must be finite".into()));
    }
    Ok(())
}

pub fn fit_convex_univariate(x: &[f64], r: &[f64], opts: &FitOptions) -> Result<UnivariateFit> {
    opts.validate()?;
    check_target(x, r)?;
    let col = SortedColumn::new(x, 0)?;
    fit_sorted(&col, r, Shape::Convex, opts, &mut Vec::new())
}

/// Concave fit, computed as the negation of the convex fit of `-r`.
pub fn fit_concave_univariate(x: &[f64], r: &[f64], opts: &FitOptions) -> Result<UnivariateFit> {
    opts.validate()?;
    check_target(x, r)?;
    let col = SortedColumn::new(x, 0)?;
    fit_sorted(&col, r, Shape::Concave, opts, &mut Vec::new())
}

/// Convex fit through the slope-increment parameterization, regardless of
/// `opts.formulation`.
pub fn fit_secondderiv(x: &[f64], r: &[f64], opts: &FitOptions) -> Result<UnivariateFit> {
    let opts = opts.with_formulation(Formulation::SecondDerivForm);
    fit_convex_univariate(x, r, &opts)
}

/// Smallest λ at which the fit of `r` on `x` with the given shape is zero.
pub fn univariate_lambda_max(x: &[f64], r: &[f64], shape: Shape, opts: &FitOptions) -> Result<f64> {
    check_target(x, r)?;
    let col = SortedColumn::new(x, 0)?;
    if col.is_constant() {
        return Ok(0.0);
    }
    let rs = col.perm.apply(r);
    let sign = if shape == Shape::Convex { 1.0 } else { -1.0 };
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    let rc: Vec<f64> = rs.iter().map(|v| sign * (v - mean)).collect();
    let candidates = hinge_candidates(&col.xs);
    let (norm, _) = dual_norm(&col.xs, &rc, &candidates, opts, &mut Vec::new())?;
    Ok(norm.max(0.0))
}

/// Fits one coordinate. `knots` carries the active hinge set between calls
/// so repeated fits of the same coordinate start from the previous support.
pub(crate) fn fit_sorted(
    col: &SortedColumn,
    r: &[f64],
    shape: Shape,
    opts: &FitOptions,
    knots: &mut Vec<usize>,
) -> Result<UnivariateFit> {
    match shape {
        Shape::Convex => fit_convex_sorted(col, r, opts, knots),
        Shape::Concave => {
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            Ok(fit_convex_sorted(col, &neg, opts, knots)?.negated())
        }
    }
}

fn fit_convex_sorted(
    col: &SortedColumn,
    r: &[f64],
    opts: &FitOptions,
    knots: &mut Vec<usize>,
) -> Result<UnivariateFit> {
    if col.is_constant() || r.iter().all(|&v| v == 0.0) {
        knots.clear();
        return Ok(UnivariateFit::zero(col, r, Shape::Convex, opts.lambda));
    }
    let rs = col.perm.apply(r);
    let (d, kkt) = match opts.formulation {
        Formulation::BetaForm => solve_beta_form(col, &rs, opts)?,
        Formulation::SecondDerivForm => solve_knots(col, &rs, opts, knots)?,
    };
    Ok(assemble(col, r, d, opts.lambda, kkt))
}

/// Builds the fit from slope increments: prefix sums give slopes and a
/// running sum over gaps gives values, which are then centered.
fn assemble(col: &SortedColumn, r: &[f64], d: Vec<f64>, lambda: f64, kkt: KktReport) -> UnivariateFit {
    let beta = slopes_from_increments(&d);
    let fs = values_from_slopes(&col.xs, &beta);
    let f = col.perm.unapply(&fs);
    let sup_norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let objective = objective_value(r, &f, lambda);
    UnivariateFit {
        coordinate: col.perm.coordinate,
        perm: col.perm.clone(),
        x_sorted: col.xs.clone(),
        f,
        beta,
        d,
        shape: Shape::Convex,
        lambda,
        sup_norm,
        objective,
        kkt,
    }
}

fn slopes_from_increments(d: &[f64]) -> Vec<f64> {
    d.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

fn increments_from_slopes(beta: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(beta.len());
    let mut prev = 0.0;
    for &b in beta {
        d.push(b - prev);
        prev = b;
    }
    d
}

/// Centered values with the given slopes between consecutive sorted points.
fn values_from_slopes(xs: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut fs = vec![0.0; n];
    for i in 0..n - 1 {
        fs[i + 1] = fs[i] + beta[i] * (xs[i + 1] - xs[i]);
    }
    let mean = fs.iter().sum::<f64>() / n as f64;
    fs.iter_mut().for_each(|v| *v -= mean);
    fs
}

/// Which parameterization [`convert_fit`] recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Recompute increments `d` from the slopes.
    SecondDerivative,
    /// Recompute slopes and fitted values from the increments.
    Subgradient,
}

pub fn convert_fit(fit: &UnivariateFit, to: Representation) -> UnivariateFit {
    let mut out = fit.clone();
    match to {
        Representation::SecondDerivative => out.d = increments_from_slopes(&fit.beta),
        Representation::Subgradient => {
            out.beta = slopes_from_increments(&fit.d);
            let fs = values_from_slopes(&fit.x_sorted, &out.beta);
            out.f = fit.perm.unapply(&fs);
            out.sup_norm = out.f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
    }
    out
}

/// Pointwise max (convex) or min (concave) of the supporting lines at the
/// training points. The last point reuses the last segment's slope.
pub fn evaluate_component(fit: &UnivariateFit, x_new: f64) -> f64 {
    let fs = fit.f_sorted();
    let n = fs.len();
    let line = |i: usize| {
        let slope = fit.beta[i.min(n - 2)];
        fs[i] + slope * (x_new - fit.x_sorted[i])
    };
    let lines = (0..n).map(line);
    match fit.shape {
        Shape::Convex => lines.fold(f64::NEG_INFINITY, f64::max),
        Shape::Concave => lines.fold(f64::INFINITY, f64::min),
    }
}

fn qp_settings(opts: &FitOptions, tol: f64, initial: Option<DVector<f64>>) -> QpSettings {
    QpSettings {
        tol,
        max_iter: opts.max_iter,
        initial_x: initial,
        ..QpSettings::default()
    }
}

/// Full QP over `(f, β, γ)` with `f` in sorted order.
fn solve_beta_form(col: &SortedColumn, rs: &[f64], opts: &FitOptions) -> Result<(Vec<f64>, KktReport)> {
    let n = rs.len();
    let nf = n;
    let nb = n - 1;
    let penalized = opts.lambda > 0.0;
    let m = nf + nb + usize::from(penalized);
    let inv_n = 1.0 / n as f64;

    let mut p = DMatrix::zeros(m, m);
    let mut q = DVector::zeros(m);
    for i in 0..nf {
        p[(i, i)] = inv_n;
        q[i] = -rs[i] * inv_n;
    }
    if penalized {
        q[m - 1] = opts.lambda;
    }

    // f_{i+1} - f_i - β_i (x_{i+1} - x_i) = 0, and Σ f = 0
    let mut a = DMatrix::zeros(nb + 1, m);
    for i in 0..nb {
        a[(i, i + 1)] = 1.0;
        a[(i, i)] = -1.0;
        a[(i, nf + i)] = -(col.xs[i + 1] - col.xs[i]);
    }
    for i in 0..nf {
        a[(nb, i)] = 1.0;
    }
    let b = DVector::zeros(nb + 1);

    // β_i - β_{i+1} ≤ 0, then ±f_i - γ ≤ 0
    let n_mono = nb.saturating_sub(1);
    let n_box = if penalized { 2 * nf } else { 0 };
    let mut g = DMatrix::zeros(n_mono + n_box, m);
    for i in 0..n_mono {
        g[(i, nf + i)] = 1.0;
        g[(i, nf + i + 1)] = -1.0;
    }
    if penalized {
        for i in 0..nf {
            g[(n_mono + 2 * i, i)] = 1.0;
            g[(n_mono + 2 * i, m - 1)] = -1.0;
            g[(n_mono + 2 * i + 1, i)] = -1.0;
            g[(n_mono + 2 * i + 1, m - 1)] = -1.0;
        }
    }
    let h = DVector::zeros(n_mono + n_box);

    let prob = QpProblem::new(p, q).with_equalities(a, b).with_inequalities(g, h);
    let sol = qp::solve_qp_with(&prob, &qp_settings(opts, opts.qp_tol, None))?.into_optimal()?;
    let beta: Vec<f64> = sol.x.rows(nf, nb).iter().copied().collect();
    Ok((increments_from_slopes(&beta), sol.kkt))
}

/// Candidate hinge positions: first index of each run of tied values lying
/// strictly between the smallest and largest sample. Hinges elsewhere are
/// either duplicates of these, the linear term, or identically zero.
fn hinge_candidates(xs: &[f64]) -> Vec<usize> {
    let n = xs.len();
    (1..n - 1)
        .filter(|&j| xs[j] > xs[0] && xs[j] < xs[n - 1] && xs[j] > xs[j - 1])
        .collect()
}

/// Centered column of the linear term (`None`) or hinge at sorted position `j`.
fn centered_column(xs: &[f64], j: Option<usize>) -> Vec<f64> {
    let mut c: Vec<f64> = match j {
        None => xs.iter().map(|v| v - xs[0]).collect(),
        Some(j) => xs.iter().map(|v| (v - xs[j]).max(0.0)).collect(),
    };
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    c.iter_mut().for_each(|v| *v -= mean);
    c
}

/// Reduced costs `Σ_i (x_i − x_j)_+ (w_i − w̄)` for every sorted position j.
fn hinge_reduced_costs(xs: &[f64], w: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n];
    let (mut s0, mut s1) = (0.0, 0.0);
    for j in (0..n).rev() {
        out[j] = s1 - xs[j] * s0;
        let wc = w[j] - mean;
        s0 += wc;
        s1 += xs[j] * wc;
    }
    out
}

struct Restricted {
    /// Slope increment per selected column (linear term first).
    d: Vec<f64>,
    /// Sup-norm bound: the epigraph variable, or 1 for the dual-norm LP.
    gamma: f64,
    /// Multipliers of `f_i ≤ γ` by sorted position.
    z_upper: Vec<(usize, f64)>,
    /// Multipliers of `−f_i ≤ γ` by sorted position.
    z_lower: Vec<(usize, f64)>,
    /// Multipliers of `d_j ≥ 0` per unit-RMS column, aligned with the hinge list.
    nu: Vec<f64>,
    objective: f64,
    raw: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Restriction {
    /// `(1/2n)‖rc − f‖² + λγ` with `|f| ≤ γ` (box rows dropped when λ = 0).
    Penalized(f64),
    /// `max ⟨rc, f⟩/n` subject to `|f| ≤ 1`.
    DualNorm,
}

/// Problem over the linear term plus hinges at `hinges`. Variables are the
/// column weights scaled to unit column norm, followed by γ when penalized.
fn solve_restricted(
    xs: &[f64],
    rc: &[f64],
    hinges: &[usize],
    mode: Restriction,
    opts: &FitOptions,
    initial: Option<DVector<f64>>,
) -> Result<Restricted> {
    let n = xs.len();
    let s = hinges.len() + 1;
    let (boxed, with_gamma) = match mode {
        Restriction::Penalized(lambda) => (lambda > 0.0, lambda > 0.0),
        Restriction::DualNorm => (true, false),
    };
    let m = s + usize::from(with_gamma);
    let inv_n = 1.0 / n as f64;

    let mut cmat = DMatrix::zeros(n, s);
    let mut scale = vec![0.0; s];
    for (c, j) in std::iter::once(None).chain(hinges.iter().map(|&j| Some(j))).enumerate() {
        let col = centered_column(xs, j);
        let norm = (col.iter().map(|v| v * v).sum::<f64>() * inv_n).sqrt();
        scale[c] = norm;
        for i in 0..n {
            cmat[(i, c)] = col[i] / norm;
        }
    }

    let mut p = DMatrix::zeros(m, m);
    if let Restriction::Penalized(_) = mode {
        let gram = cmat.tr_mul(&cmat) * inv_n;
        p.view_mut((0, 0), (s, s))
            .copy_from(&((&gram + gram.transpose()) * 0.5));
    }
    let rcv = DVector::from_column_slice(rc);
    let mut q = DVector::zeros(m);
    q.rows_mut(0, s).copy_from(&(-cmat.tr_mul(&rcv) * inv_n));

    // rows that can hold the sup-norm: the ends for the max, ends and knots for the min
    let mut lower_rows: Vec<usize> = vec![0, n - 1];
    lower_rows.extend(hinges.iter().copied());
    let upper_rows = [0, n - 1];
    let n_box = if boxed { upper_rows.len() + lower_rows.len() } else { 0 };
    let mut g = DMatrix::zeros(hinges.len() + n_box, m);
    let mut h = DVector::zeros(hinges.len() + n_box);
    for c in 0..hinges.len() {
        g[(c, c + 1)] = -1.0;
    }
    if boxed {
        if let Restriction::Penalized(lambda) = mode {
            q[m - 1] = lambda;
        }
        let rows = upper_rows
            .iter()
            .map(|&i| (i, 1.0))
            .chain(lower_rows.iter().map(|&i| (i, -1.0)));
        for (row, (i, sign)) in (hinges.len()..).zip(rows) {
            for c in 0..s {
                g[(row, c)] = sign * cmat[(i, c)];
            }
            if with_gamma {
                g[(row, m - 1)] = -1.0;
            } else {
                h[row] = 1.0;
            }
        }
    }
    let prob = QpProblem::new(p, q).with_inequalities(g, h);
    let sol = qp::solve_qp_with(&prob, &qp_settings(opts, 0.1 * opts.qp_tol, initial))?.into_optimal()?;

    let d = (0..s).map(|c| sol.x[c] / scale[c]).collect();
    let nu = (0..hinges.len()).map(|c| sol.z_ineq[c]).collect();
    let (gamma, z_upper, z_lower) = if boxed {
        let base = hinges.len();
        let up = upper_rows
            .iter()
            .enumerate()
            .map(|(t, &i)| (i, sol.z_ineq[base + t]))
            .collect();
        let lo = lower_rows
            .iter()
            .enumerate()
            .map(|(t, &i)| (i, sol.z_ineq[base + upper_rows.len() + t]))
            .collect();
        (if with_gamma { sol.x[m - 1] } else { 1.0 }, up, lo)
    } else {
        (0.0, Vec::new(), Vec::new())
    };
    Ok(Restricted {
        d,
        gamma,
        z_upper,
        z_lower,
        nu,
        objective: sol.objective,
        raw: sol.x,
    })
}

/// Increments indexed by sorted position.
fn expand_increments(n: usize, hinges: &[usize], d: &[f64]) -> Vec<f64> {
    let mut d_full = vec![0.0; n - 1];
    d_full[0] = d[0];
    for (c, &j) in hinges.iter().enumerate() {
        d_full[j] = d[c + 1];
    }
    d_full
}

/// Reduced costs of every hinge for the multiplier-adjusted gradient
/// `grad + z⁺ − z⁻`.
/// Root-mean-square of every centered hinge column `(x − x_j)₊`; index 0 is
/// the linear column. Suffix statistics are accumulated Welford-style.
fn hinge_rms(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0; n];
    let (mut count, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for j in (0..n).rev() {
        let gap = mean - xs[j];
        let sq = m2 + count * (1.0 - count / n as f64) * gap * gap;
        out[j] = (sq.max(0.0) / n as f64).sqrt();
        count += 1.0;
        let delta = xs[j] - mean;
        mean += delta / count;
        m2 += delta * (xs[j] - mean);
    }
    out
}

/// Reduced costs per unit-RMS hinge column, so the tolerance bounds the
/// objective decrease any single hinge could still achieve.
fn restricted_reduced_costs(xs: &[f64], rms: &[f64], mut grad: Vec<f64>, sol: &Restricted) -> Vec<f64> {
    for &(i, z) in &sol.z_upper {
        grad[i] += z;
    }
    for &(i, z) in &sol.z_lower {
        grad[i] -= z;
    }
    let mut reduced = hinge_reduced_costs(xs, &grad);
    for (c, s) in reduced.iter_mut().zip(rms) {
        *c = if *s > 0.0 { *c / s } else { 0.0 };
    }
    reduced
}

/// One new knot per run of consecutive candidates with negative reduced cost.
fn pick_knots(candidates: &[usize], reduced: &[f64], in_knots: &[bool], tol: f64) -> Vec<usize> {
    let mut additions = Vec::new();
    let mut run_best: Option<(usize, f64)> = None;
    for &j in candidates {
        let c = reduced[j];
        if !in_knots[j] && c < -tol {
            if run_best.is_none_or(|(_, v)| c < v) {
                run_best = Some((j, c));
            }
        } else if let Some((b, _)) = run_best.take() {
            additions.push(b);
        }
    }
    if let Some((b, _)) = run_best {
        additions.push(b);
    }
    additions
}

fn membership(n: usize, knots: &[usize]) -> Vec<bool> {
    let mut v = vec![false; n];
    knots.iter().for_each(|&j| v[j] = true);
    v
}

fn merge_knots(knots: &[usize], additions: &[usize]) -> Vec<usize> {
    let mut next: Vec<usize> = knots.iter().chain(additions).copied().collect();
    next.sort_unstable();
    next.dedup();
    next
}

/// `max ⟨rc, g⟩/n` over centered convex `g` with `|g_i| ≤ 1`. The zero fit is
/// optimal exactly when λ is at least this value. Returns the value and the
/// most negative reduced cost left at termination.
fn dual_norm(
    xs: &[f64],
    rc: &[f64],
    candidates: &[usize],
    opts: &FitOptions,
    knots: &mut Vec<usize>,
) -> Result<(f64, f64)> {
    let n = xs.len();
    let rc_tol = 0.5 * opts.qp_tol;
    let rms = hinge_rms(xs);
    let grad: Vec<f64> = rc.iter().map(|v| -v / n as f64).collect();
    for _ in 0..candidates.len() + 2 {
        let sol = solve_restricted(xs, rc, knots, Restriction::DualNorm, opts, None)?;
        let reduced = restricted_reduced_costs(xs, &rms, grad.clone(), &sol);
        let in_knots = membership(n, knots);
        let additions = pick_knots(candidates, &reduced, &in_knots, rc_tol);
        if additions.is_empty() {
            let worst = candidates
                .iter()
                .map(|&j| -reduced[j])
                .chain(std::iter::once(reduced[0].abs()))
                .fold(0.0f64, f64::max);
            return Ok((-sol.objective, worst));
        }
        *knots = merge_knots(knots, &additions);
    }
    Err(Error::Qp {
        status: qp::QpStatus::MaxIter,
        message: "dual-norm knot generation did not terminate".into(),
    })
}

/// Knot generation on the slope-increment formulation. Returns increments
/// indexed by sorted position and the KKT report of the full problem.
fn solve_knots(
    col: &SortedColumn,
    rs: &[f64],
    opts: &FitOptions,
    knots: &mut Vec<usize>,
) -> Result<(Vec<f64>, KktReport)> {
    let xs = &col.xs;
    let n = xs.len();
    let mean = rs.iter().sum::<f64>() / n as f64;
    let rc: Vec<f64> = rs.iter().map(|v| v - mean).collect();
    let rc_scale = rc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let candidates = hinge_candidates(xs);
    let rms = hinge_rms(xs);
    let is_candidate = membership(n, &candidates);
    knots.retain(|&j| j < n && is_candidate[j]);
    knots.sort_unstable();
    knots.dedup();

    let rc_tol = 0.5 * opts.qp_tol;
    let mode = Restriction::Penalized(opts.lambda);
    let mut zero_checked = false;
    let mut initial: Option<DVector<f64>> = None;
    for _ in 0..2 * candidates.len() + 4 {
        let sol = solve_restricted(xs, &rc, knots, mode, opts, initial.take())?;
        let d_full = expand_increments(n, knots, &sol.d);
        let fs = values_from_slopes(xs, &slopes_from_increments(&d_full));
        let grad: Vec<f64> = (0..n).map(|i| -(rc[i] - fs[i]) / n as f64).collect();
        let reduced = restricted_reduced_costs(xs, &rms, grad, &sol);
        let in_knots = membership(n, knots);
        let additions = pick_knots(&candidates, &reduced, &in_knots, rc_tol);

        if additions.is_empty() {
            let kkt = full_kkt(&fs, &d_full, &reduced, &sol, opts.lambda, &candidates, knots, &rms);
            knots.retain(|&j| d_full[j] > 0.0);
            if !kkt.within(opts.qp_tol) {
                return Err(Error::Qp {
                    status: qp::QpStatus::MaxIter,
                    message: format!("knot solution failed certification: {kkt:?}"),
                });
            }
            return Ok((d_full, kkt));
        }

        // At f = 0 every box row is active and the restricted multipliers
        // are not informative; settle zero-optimality with the dual norm.
        let is_zero = fs.iter().all(|v| v.abs() <= 1e-12 * (1.0 + rc_scale));
        if opts.lambda > 0.0 && is_zero && !zero_checked {
            zero_checked = true;
            let mut lp_knots = knots.clone();
            match dual_norm(xs, &rc, &candidates, opts, &mut lp_knots) {
                Ok((norm, worst)) if norm <= opts.lambda => {
                    knots.clear();
                    let kkt = KktReport {
                        dual_residual: worst,
                        ..KktReport::default()
                    };
                    return Ok((vec![0.0; n - 1], kkt));
                }
                Ok(_) => {
                    *knots = merge_knots(&lp_knots, &additions);
                    continue;
                }
                Err(e) if e.is_numeric() => {
                    log::debug!("zero certificate unavailable: {e}");
                }
                Err(e) => return Err(e),
            }
        }

        // warm start: previous weights, zeros for new hinges, γ last
        let next = merge_knots(knots, &additions);
        let mut x0 = vec![0.0; next.len() + 1 + usize::from(opts.lambda > 0.0)];
        x0[0] = sol.raw[0];
        for (c, &j) in knots.iter().enumerate() {
            let pos = next.binary_search(&j).expect("existing knot kept");
            x0[pos + 1] = sol.raw[c + 1];
        }
        if opts.lambda > 0.0 {
            let last = x0.len() - 1;
            x0[last] = sol.gamma;
        }
        initial = Some(DVector::from_vec(x0));
        *knots = next;
    }
    Err(Error::Qp {
        status: qp::QpStatus::MaxIter,
        message: "knot generation did not terminate".into(),
    })
}

/// KKT residuals of the full increment-space problem at the final iterate.
#[allow(clippy::too_many_arguments)]
fn full_kkt(
    fs: &[f64],
    d_full: &[f64],
    reduced: &[f64],
    sol: &Restricted,
    lambda: f64,
    candidates: &[usize],
    knots: &[usize],
    rms: &[f64],
) -> KktReport {
    let mut report = KktReport::default();
    // linear term is unconstrained
    let lin = reduced[0];
    report.dual_residual = lin.abs();
    for &j in candidates {
        let c = reduced[j];
        // a selected hinge keeps the multiplier of its restricted solve
        let nu = match knots.binary_search(&j) {
            Ok(k) => sol.nu[k],
            Err(_) => c.max(0.0),
        };
        report.dual_residual = report.dual_residual.max((c - nu).abs());
        let dj = d_full[j] * rms[j];
        report.complementarity = report.complementarity.max((nu * dj).abs());
        report.primal_ineq_violation = report.primal_ineq_violation.max((-dj).max(0.0));
    }
    for nu in &sol.nu {
        report.dual_sign_violation = report.dual_sign_violation.max((-nu).max(0.0));
    }
    if lambda > 0.0 {
        let gamma = sol.gamma;
        let zsum: f64 = sol.z_upper.iter().chain(&sol.z_lower).map(|(_, z)| z).sum();
        report.dual_residual = report.dual_residual.max((lambda - zsum).abs());
        for v in fs {
            let viol = (v.abs() - gamma).max(0.0);
            report.primal_ineq_violation = report.primal_ineq_violation.max(viol);
        }
        for &(i, z) in &sol.z_upper {
            report.complementarity = report.complementarity.max((z * (gamma - fs[i])).abs());
            report.dual_sign_violation = report.dual_sign_violation.max((-z).max(0.0));
        }
        for &(i, z) in &sol.z_lower {
            report.complementarity = report.complementarity.max((z * (gamma + fs[i])).abs());
            report.dual_sign_violation = report.dual_sign_violation.max((-z).max(0.0));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    const X3: [f64; 3] = [1.0, 2.0, 3.0];
    const V: [f64; 3] = [1.0 / 3.0, -2.0 / 3.0, 1.0 / 3.0];

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn both_forms() -> [FitOptions; 2] {
        [
            FitOptions::new(0.0).with_formulation(Formulation::BetaForm),
            FitOptions::new(0.0).with_formulation(Formulation::SecondDerivForm),
        ]
    }

    #[test]
    fn centered_convex_data_is_a_fixed_point() {
        for opts in both_forms() {
            let fit = fit_convex_univariate(&X3, &V, &opts).unwrap();
            assert_close(&fit.f, &V, 1e-8);
            assert_close(&fit.beta, &[-1.0, 1.0], 1e-8);
            assert_close(&fit.d, &[-1.0, 2.0], 1e-8);
            fit.check_invariants(1e-8).unwrap();
        }
    }

    #[test]
    fn zero_target_gives_zero_fit() {
        for lambda in [0.0, 0.5, 10.0] {
            let fit = fit_convex_univariate(&X3, &[0.0; 3], &FitOptions::new(lambda)).unwrap();
            assert_eq!(fit.sup_norm, 0.0);
            let fit = fit_secondderiv(&X3, &[0.0; 3], &FitOptions::new(lambda)).unwrap();
            assert!(fit.d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn large_penalty_zeroes_the_fit() {
        for mut opts in both_forms() {
            opts.lambda = 10.0;
            let fit = fit_convex_univariate(&X3, &V, &opts).unwrap();
            assert!(fit.sup_norm <= 1e-9, "{:?}", fit.f);
        }
    }

    #[test]
    fn concave_fit_of_v_shape_is_zero() {
        for opts in both_forms() {
            let fit = fit_concave_univariate(&X3, &V, &opts).unwrap();
            assert!(fit.sup_norm <= 1e-9);
            assert_eq!(fit.shape, Shape::Concave);
        }
    }

    #[test]
    fn concave_data_is_reproduced() {
        let r: Vec<f64> = V.iter().map(|v| -v).collect();
        let fit = fit_concave_univariate(&X3, &r, &FitOptions::default()).unwrap();
        assert_close(&fit.f, &r, 1e-8);
        fit.check_invariants(1e-8).unwrap();
    }

    #[test]
    fn constant_column_gives_zero_fit() {
        let fit = fit_convex_univariate(&[2.0; 4], &[1.0, -1.0, 2.0, 0.0], &FitOptions::new(0.3)).unwrap();
        assert_eq!(fit.sup_norm, 0.0);
    }

    #[test]
    fn two_points_reduce_to_shrunk_line() {
        // centered target ±1/2, slope 1; penalty λ shrinks the sup-norm by 2λ·n/2... with n = 2:
        // minimize (1/4)·2(1/2 - t)² + λ t  =>  t = 1/2 - λ
        let x = [0.0, 1.0];
        let r = [-0.5, 0.5];
        for opts in [
            FitOptions::new(0.2),
            FitOptions::new(0.2).with_formulation(Formulation::BetaForm),
        ] {
            let fit = fit_convex_univariate(&x, &r, &opts).unwrap();
            assert_close(&fit.f, &[-0.3, 0.3], 1e-8);
            assert_eq!(fit.beta.len(), 1);
        }
    }

    #[test]
    fn ties_are_supported() {
        let x = [0.0, 1.0, 1.0, 2.0, 3.0, 3.0];
        let r = [2.0, 0.5, -0.5, 0.0, 1.5, 2.5];
        let a = fit_convex_univariate(&x, &r, &FitOptions::new(0.05)).unwrap();
        let b = fit_convex_univariate(&x, &r, &FitOptions::new(0.05).with_formulation(Formulation::BetaForm)).unwrap();
        assert_close(&a.f, &b.f, 1e-6);
        assert!((a.f[1] - a.f[2]).abs() < 1e-12);
        a.check_invariants(1e-8).unwrap();
    }

    #[test]
    fn evaluation_examples() {
        let fit = fit_convex_univariate(&X3, &V, &FitOptions::default()).unwrap();
        assert!((evaluate_component(&fit, 2.0) + 2.0 / 3.0).abs() < 1e-8);
        assert!((evaluate_component(&fit, 4.0) - 4.0 / 3.0).abs() < 1e-8);
        assert!((evaluate_component(&fit, 0.0) - 4.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn conversion_examples() {
        let mut fit = fit_convex_univariate(&X3, &V, &FitOptions::default()).unwrap();
        fit.beta = vec![-1.0, 1.0];
        let to_d = convert_fit(&fit, Representation::SecondDerivative);
        assert_eq!(to_d.d, vec![-1.0, 2.0]);

        fit.d = vec![0.0, 0.0];
        let to_beta = convert_fit(&fit, Representation::Subgradient);
        assert_eq!(to_beta.beta, vec![0.0, 0.0]);
        assert!(to_beta.f.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_options() {
        assert!(fit_convex_univariate(&X3, &V, &FitOptions::new(-1.0)).is_err());
        assert!(fit_convex_univariate(&X3, &V[..2], &FitOptions::new(0.0)).is_err());
        assert!(fit_convex_univariate(&[1.0], &[1.0], &FitOptions::new(0.0)).is_err());
    }

    #[test]
    fn reduced_costs_match_direct_sums() {
        let xs = [0.0, 0.5, 0.5, 2.0, 3.5];
        let w = [0.3, -1.0, 0.2, 0.7, -0.1];
        let mean = w.iter().sum::<f64>() / 5.0;
        let fast = hinge_reduced_costs(&xs, &w);
        for j in 0..5 {
            let direct: f64 = (0..5).map(|i| (xs[i] - xs[j]).max(0.0) * (w[i] - mean)).sum();
            assert!((fast[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_rms_matches_direct_norms() {
        let xs = [-3.0, -1.0, 0.5, 0.5, 2.0, 1e3];
        let rms = hinge_rms(&xs);
        for (j, r) in rms.iter().enumerate() {
            let col = centered_column(&xs, Some(j));
            let direct = (col.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((r - direct).abs() <= 1e-12 * (1.0 + direct));
        }
    }
}
