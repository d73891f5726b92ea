//! Additive convex fitting by block coordinate descent, the decoupled
//! concave stage, screening reports and the deterministic-condition check.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Permutation};
use crate::shape::{self, FitOptions, Formulation, Shape, SortedColumn, UnivariateFit, ZERO_THRESHOLD};
use crate::{Error, Result};

/// `4·sqrt(ln(np)/n)`.
pub fn default_lambda(n: usize, p: usize) -> f64 {
    4.0 * ((n as f64 * p as f64).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcOptions {
    /// Penalty on the mean-squared-error scale, see [`additive_objective`].
    pub lambda: f64,
    pub formulation: Formulation,
    /// Tolerance handed to every univariate QP.
    pub qp_tol: f64,
    /// Stop once a full cycle moves no fitted value by more than
    /// `tol·(1 + ‖y − ȳ‖∞)`.
    pub tol: f64,
    pub max_cycles: usize,
}

impl AcOptions {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            formulation: Formulation::SecondDerivForm,
            qp_tol: crate::qp::DEFAULT_TOL,
            tol: 1e-7,
            max_cycles: 200,
        }
    }

    /// Options with [`default_lambda`] for the dataset's shape.
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::new(default_lambda(ds.n(), ds.p()))
    }

    /// Univariate options for one block: the blocks minimise
    /// `(1/2n)‖r − f‖² + (λ/2)‖f‖∞`, the same problem as `(1/n)‖r − f‖² + λ‖f‖∞`.
    pub fn block_options(&self) -> FitOptions {
        FitOptions {
            lambda: 0.5 * self.lambda,
            formulation: self.formulation,
            qp_tol: self.qp_tol,
            ..FitOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a finite nonnegative number, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) || !(self.qp_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.max_cycles == 0 {
            return Err(Error::InvalidArgument("max_cycles must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub mu: f64,
    /// One component per coordinate; coordinates left out of a fit hold zero.
    pub components: Vec<UnivariateFit>,
    pub lambda: f64,
    pub cycles: usize,
    /// Objective before the first cycle, then after every cycle.
    pub objective_trace: Vec<f64>,
    /// False when the cycle cap was reached first.
    pub converged: bool,
}

impl AdditiveModel {
    pub fn p(&self) -> usize {
        self.components.len()
    }

    pub fn sup_norms(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.sup_norm).collect()
    }

    /// `μ̂ + Σ_k f̂_k` at the training samples.
    pub fn fitted(&self) -> Vec<f64> {
        let n = self.components.first().map_or(0, UnivariateFit::n);
        let mut out = vec![self.mu; n];
        for c in &self.components {
            out.iter_mut().zip(&c.f).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Prediction at a new point through the supporting lines of each component.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.mu
            + self
                .components
                .iter()
                .filter(|c| c.sup_norm > 0.0)
                .map(|c| shape::evaluate_component(c, x[c.coordinate]))
                .sum::<f64>()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }
}

/// `(1/n)‖y − μ − Σ f_k‖² + λ Σ ‖f_k‖∞`.
///
/// Each block of this objective is twice a univariate problem at `λ/2`, so
/// the components carry `λ/2` in their own `lambda` field.
pub fn additive_objective(y: &[f64], model: &AdditiveModel) -> f64 {
    let fitted = model.fitted();
    let n = y.len() as f64;
    let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    rss / n + model.lambda * model.sup_norms().iter().sum::<f64>()
}

/// Sparse additive convex fit over all coordinates, starting from zero.
pub fn fit_ac(ds: &Dataset, opts: &AcOptions) -> Result<AdditiveModel> {
    let shapes: Vec<(usize, Shape)> = (0..ds.p()).map(|k| (k, Shape::Convex)).collect();
    fit_additive(ds, &shapes, opts, None)
}

/// Block coordinate descent over the listed `(coordinate, shape)` pairs in
/// the given order. Other coordinates get zero components. A previous model
/// on the same dataset may be passed as a warm start.
pub fn fit_additive(
    ds: &Dataset,
    shapes: &[(usize, Shape)],
    opts: &AcOptions,
    warm: Option<&AdditiveModel>,
) -> Result<AdditiveModel> {
    opts.validate()?;
    let (n, p) = (ds.n(), ds.p());
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    for &(k, _) in shapes {
        if k >= p {
            return Err(Error::CoordinateOutOfRange { index: k, p });
        }
    }
    if let Some(w) = warm {
        if w.p() != p || w.components.first().is_some_and(|c| c.n() != n) {
            return Err(Error::DimensionMismatch("warm start does not match the dataset".into()));
        }
    }

    let y = ds.y();
    let mu = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let y_scale = 1.0 + yc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fit_opts = opts.block_options();

    let columns: Vec<SortedColumn> = (0..p)
        .map(|k| SortedColumn::new(ds.column(k), k))
        .collect::<Result<_>>()?;
    let mut components: Vec<UnivariateFit> = Vec::with_capacity(p);
    let mut knots: Vec<Vec<usize>> = vec![Vec::new(); p];
    let listed: Vec<bool> = {
        let mut v = vec![false; p];
        shapes.iter().for_each(|&(k, _)| v[k] = true);
        v
    };
    for k in 0..p {
        let shape = shapes.iter().find(|s| s.0 == k).map_or(Shape::Convex, |s| s.1);
        let start = match warm {
            Some(w) if listed[k] && w.components[k].shape == shape => {
                let c = w.components[k].clone();
                knots[k] = (1..n - 1).filter(|&i| c.d[i] != 0.0).collect();
                c
            }
            _ => zero_component(&columns[k], shape, fit_opts.lambda),
        };
        components.push(start);
    }

    let mut total = vec![0.0; n];
    for c in &components {
        total.iter_mut().zip(&c.f).for_each(|(t, v)| *t += v);
    }
    let objective = |total: &[f64], comps: &[UnivariateFit]| {
        2.0 * shape::objective_value(&yc, total, 0.0) + opts.lambda * comps.iter().map(|c| c.sup_norm).sum::<f64>()
    };
    let mut trace = vec![objective(&total, &components)];
    let mut converged = false;
    let mut cycles = 0;
    let mut partial = vec![0.0; n];

    while cycles < opts.max_cycles {
        cycles += 1;
        let mut max_change = 0.0f64;
        for &(k, shape) in shapes {
            let old = &components[k];
            for i in 0..n {
                partial[i] = yc[i] - total[i] + old.f[i];
            }
            let new = shape::fit_sorted(&columns[k], &partial, shape, &fit_opts, &mut knots[k])
                .map_err(|e| e.at_coordinate(k))?;
            let old_block = shape::objective_value(&partial, &old.f, fit_opts.lambda);
            // rounding-level regressions still take the fresh solve
            if new.objective > old_block + 1e-12 * (1.0 + old_block.abs()) {
                log::debug!(
                    "coordinate {k}: block solve did not improve ({:e} > {:e}), keeping previous",
                    new.objective,
                    old_block
                );
                continue;
            }
            for ((t, nv), ov) in total.iter_mut().zip(&new.f).zip(&old.f) {
                let delta = nv - ov;
                max_change = max_change.max(delta.abs());
                *t += delta;
            }
            components[k] = new;
        }
        trace.push(objective(&total, &components));
        if max_change <= opts.tol * y_scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "block coordinate descent hit the cycle cap ({}) before converging",
            opts.max_cycles
        );
    }
    Ok(AdditiveModel {
        mu,
        components,
        lambda: opts.lambda,
        cycles,
        objective_trace: trace,
        converged,
    })
}

fn zero_component(col: &SortedColumn, shape: Shape, lambda: f64) -> UnivariateFit {
    let n = col.xs.len();
    UnivariateFit {
        coordinate: col.perm.coordinate,
        perm: col.perm.clone(),
        x_sorted: col.xs.clone(),
        f: vec![0.0; n],
        beta: vec![0.0; n - 1],
        d: vec![0.0; n - 1],
        shape,
        lambda,
        sup_norm: 0.0,
        objective: f64::NAN,
        kkt: Default::default(),
    }
}

/// `r̂ = y − μ̂ − Σ_k f̂_k` at the training samples.
pub fn residual(ds: &Dataset, model: &AdditiveModel) -> Vec<f64> {
    ds.y().iter().zip(model.fitted()).map(|(y, f)| y - f).collect()
}

/// Concave fits of the residual, keyed by coordinate.
pub type ConcaveComponents = BTreeMap<usize, UnivariateFit>;

/// Fits a concave function of the AC residual on every coordinate whose AC
/// component is zero (sup-norm at most [`ZERO_THRESHOLD`]). `lambda` is on
/// the same scale as [`AcOptions::lambda`].
pub fn fit_dc(ds: &Dataset, model: &AdditiveModel, lambda: f64) -> Result<ConcaveComponents> {
    fit_dc_with(ds, model, ZERO_THRESHOLD, &AcOptions::new(lambda).block_options())
}

/// As [`fit_dc`] with the univariate options given directly.
pub fn fit_dc_with(
    ds: &Dataset,
    model: &AdditiveModel,
    threshold: f64,
    opts: &FitOptions,
) -> Result<ConcaveComponents> {
    if model.p() != ds.p() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} components, dataset has {} coordinates",
            model.p(),
            ds.p()
        )));
    }
    let r = residual(ds, model);
    let zeroed: Vec<usize> = (0..ds.p())
        .filter(|&k| model.components[k].sup_norm <= threshold)
        .collect();
    let fits: Vec<Result<(usize, UnivariateFit)>> = zeroed
        .par_iter()
        .map(|&k| {
            let col = SortedColumn::new(ds.column(k), k)?;
            shape::fit_sorted(&col, &r, Shape::Concave, opts, &mut Vec::new())
                .map(|fit| (k, fit))
                .map_err(|e| e.at_coordinate(k))
        })
        .collect();
    fits.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    /// Selected coordinates in increasing order.
    pub selected: Vec<usize>,
    pub ac_norms: Vec<f64>,
    /// Concave-stage sup-norms, only for coordinates the AC stage zeroed.
    pub dc_norms: BTreeMap<usize, f64>,
    pub lambda: f64,
    pub threshold: f64,
    pub cycles: usize,
    pub converged: bool,
}

impl ScreeningReport {
    pub fn is_selected(&self, k: usize) -> bool {
        self.selected.binary_search(&k).is_ok()
    }
}

/// Everything produced by one screening run.
#[derive(Debug, Clone)]
pub struct Screening {
    pub report: ScreeningReport,
    pub model: AdditiveModel,
    pub concave: ConcaveComponents,
}

/// AC stage, residual, DC stage and selection with default options.
pub fn screen(ds: &Dataset, lambda: f64, threshold: f64) -> Result<ScreeningReport> {
    Ok(screen_with(ds, &AcOptions::new(lambda), threshold, None)?.report)
}

pub fn screen_with(ds: &Dataset, opts: &AcOptions, threshold: f64, warm: Option<&AdditiveModel>) -> Result<Screening> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    let shapes: Vec<(usize, Shape)> = (0..ds.p()).map(|k| (k, Shape::Convex)).collect();
    let model = fit_additive(ds, &shapes, opts, warm)?;
    let concave = fit_dc_with(ds, &model, threshold, &opts.block_options())?;
    let ac_norms = model.sup_norms();
    let dc_norms: BTreeMap<usize, f64> = concave.iter().map(|(&k, g)| (k, g.sup_norm)).collect();
    let selected = (0..ds.p())
        .filter(|&k| ac_norms[k] > threshold || dc_norms.get(&k).is_some_and(|&v| v > threshold))
        .collect();
    let report = ScreeningReport {
        selected,
        ac_norms,
        dc_norms,
        lambda: opts.lambda,
        threshold,
        cycles: model.cycles,
        converged: model.converged,
    };
    Ok(Screening { report, model, concave })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionVariant {
    /// `λ > max_i |S_i| / (2n)`.
    MainText,
    /// `λ ≥ range·max_i |32 S_i / n|`, max gap at most range/16, range ≥ 1.
    Appendix,
}

/// Statistics for one coordinate; `S_i` are suffix sums of the residual
/// along the coordinate's ascending sort order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCondition {
    pub coordinate: usize,
    pub main_statistic: f64,
    pub main_holds: bool,
    pub appendix_statistic: f64,
    pub gap_ratio: f64,
    pub range: f64,
    pub appendix_holds: bool,
}

impl CoordinateCondition {
    pub fn holds(&self, variant: ConditionVariant) -> bool {
        match variant {
            ConditionVariant::MainText => self.main_holds,
            ConditionVariant::Appendix => self.appendix_holds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub lambda: f64,
    pub coordinates: Vec<CoordinateCondition>,
}

impl ConditionReport {
    pub fn holds_all(&self, variant: ConditionVariant) -> bool {
        self.coordinates.iter().all(|c| c.holds(variant))
    }
}

pub fn check_deterministic_condition(
    ds: &Dataset,
    r_hat: &[f64],
    candidates: &[usize],
    lambda: f64,
) -> Result<ConditionReport> {
    let n = ds.n();
    if r_hat.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "residual has {} entries, dataset has {n} samples",
            r_hat.len()
        )));
    }
    let mut coordinates = Vec::with_capacity(candidates.len());
    for &k in candidates {
        if k >= ds.p() {
            return Err(Error::CoordinateOutOfRange { index: k, p: ds.p() });
        }
        let x = ds.column(k);
        let perm = Permutation::sorting(x, k);
        let xs = perm.apply(x);
        let rs = perm.apply(r_hat);
        let mut suffix = 0.0;
        let mut max_suffix = 0.0f64;
        for v in rs.iter().rev() {
            suffix += v;
            max_suffix = max_suffix.max(suffix.abs());
        }
        let range = xs[n - 1] - xs[0];
        let max_gap = xs.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
        let gap_ratio = if range > 0.0 { max_gap / range } else { 0.0 };
        let main_statistic = max_suffix / (2.0 * n as f64);
        let appendix_statistic = range * 32.0 * max_suffix / n as f64;
        coordinates.push(CoordinateCondition {
            coordinate: k,
            main_statistic,
            main_holds: lambda > main_statistic,
            appendix_statistic,
            gap_ratio,
            range,
            appendix_holds: lambda >= appendix_statistic && gap_ratio <= 1.0 / 16.0 && range >= 1.0,
        });
    }
    Ok(ConditionReport { lambda, coordinates })
}
