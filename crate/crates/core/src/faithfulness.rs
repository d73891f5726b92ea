//! Population additive projections on tensor grids.
//!
//! A [`GridDensity`] stores density values on a uniform tensor grid with at
//! most three axes. Integrals are cell sums: every grid point carries the
//! same cell volume, so the probability of point `i` is `w_i · Π h_d`.
//! Conditional expectations renormalize the slice through a grid value.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::qp::{self, QpProblem, QpSettings};
use crate::{Error, Result};

pub const MAX_DIM: usize = 3;

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.is_empty() || axes.len() > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "grids need between 1 and {MAX_DIM} axes, got {}",
            axes.len()
        )));
    }
    for (d, axis) in axes.iter().enumerate() {
        if axis.len() < 2 {
            return Err(Error::InvalidArgument(format!("axis {d} needs at least two points")));
        }
        let h = axis[1] - axis[0];
        let uniform = axis
            .windows(2)
            .all(|w| w[1] > w[0] && ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1.0));
        if !uniform {
            return Err(Error::InvalidArgument(format!(
                "axis {d} is not a uniform increasing grid"
            )));
        }
    }
    Ok(())
}

/// `m` equally spaced points from `lo` to `hi`, endpoints included.
pub fn uniform_axis(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let h = (hi - lo) / (m - 1) as f64;
    (0..m)
        .map(|j| if j + 1 == m { hi } else { lo + h * j as f64 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    dims: [usize; MAX_DIM],
    strides: [usize; MAX_DIM],
    ndim: usize,
    len: usize,
}

impl Layout {
    fn new(axes: &[Vec<f64>]) -> Self {
        let ndim = axes.len();
        let mut dims = [1; MAX_DIM];
        let mut strides = [0; MAX_DIM];
        let mut len = 1;
        for d in (0..ndim).rev() {
            dims[d] = axes[d].len();
            strides[d] = len;
            len *= dims[d];
        }
        Self {
            dims,
            strides,
            ndim,
            len,
        }
    }

    fn coord(&self, flat: usize, d: usize) -> usize {
        (flat / self.strides[d]) % self.dims[d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    axes: Vec<Vec<f64>>,
    /// Row-major, last axis fastest.
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        check_axes(&axes)?;
        let len = Layout::new(&axes).len;
        if values.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "grid has {len} points, got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid function values must be finite".into()));
        }
        Ok(Self { axes, values })
    }

    /// Tabulates `f` at every grid point.
    pub fn from_fn(axes: Vec<Vec<f64>>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        check_axes(&axes)?;
        let layout = Layout::new(&axes);
        let mut point = vec![0.0; axes.len()];
        let values = (0..layout.len)
            .map(|i| {
                for (d, v) in point.iter_mut().enumerate() {
                    *v = axes[d][layout.coord(i, d)];
                }
                f(&point)
            })
            .collect();
        Self::new(axes, values)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        let layout = Layout::new(&self.axes);
        let flat = index
            .iter()
            .enumerate()
            .map(|(d, &j)| j * layout.strides[d])
            .sum::<usize>();
        self.values[flat]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    axes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl GridDensity {
    /// Normalizes nonnegative density values to unit cell-sum mass.
    pub fn new(axes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let raw = GridFunction::new(axes, weights)?;
        if raw.values.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("density values must be nonnegative".into()));
        }
        let GridFunction { axes, mut values } = raw;
        let cell: f64 = axes.iter().map(|a| a[1] - a[0]).product();
        let mass = values.iter().sum::<f64>() * cell;
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("density has zero mass".into()));
        }
        values.iter_mut().for_each(|w| *w /= mass);
        Ok(Self { axes, weights: values })
    }

    pub fn from_fn(axes: Vec<Vec<f64>>, p: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let raw = GridFunction::from_fn(axes, p)?;
        Self::new(raw.axes, raw.values)
    }

    pub fn uniform(axes: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_fn(axes, |_| 1.0)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    fn cell(&self) -> f64 {
        self.axes.iter().map(|a| a[1] - a[0]).product()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.axes)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.cell()
    }

    pub fn is_positive(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    /// Point masses of the marginal along `axis`; they sum to one.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let layout = self.layout();
        let cell = self.cell();
        let mut out = vec![0.0; self.axes[axis].len()];
        for (i, w) in self.weights.iter().enumerate() {
            out[layout.coord(i, axis)] += w * cell;
        }
        out
    }

    pub fn expectation(&self, f: &GridFunction) -> Result<f64> {
        self.check_function(f)?;
        let cell = self.cell();
        Ok(self.weights.iter().zip(&f.values).map(|(w, v)| w * v).sum::<f64>() * cell)
    }

    fn check_function(&self, f: &GridFunction) -> Result<()> {
        if f.axes != self.axes {
            return Err(Error::DimensionMismatch("function and density grids differ".into()));
        }
        Ok(())
    }

    /// `E[f | x_axis]` at every point of the axis.
    pub fn conditional_mean(&self, f: &GridFunction, axis: usize) -> Result<GridFunction> {
        self.check_function(f)?;
        self.check_axis(axis)?;
        let values = self.conditional(axis, |i| f.values[i])?;
        GridFunction::new(vec![self.axes[axis].clone()], values)
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::CoordinateOutOfRange {
                index: axis,
                p: self.ndim(),
            });
        }
        Ok(())
    }

    fn conditional(&self, axis: usize, value: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
        let layout = self.layout();
        let m = self.axes[axis].len();
        let mut num = vec![0.0; m];
        let mut den = vec![0.0; m];
        for (i, &w) in self.weights.iter().enumerate() {
            let j = layout.coord(i, axis);
            num[j] += w * value(i);
            den[j] += w;
        }
        num.iter()
            .zip(&den)
            .enumerate()
            .map(|(index, (a, b))| {
                if *b > 0.0 {
                    Ok(a / b)
                } else {
                    Err(Error::ZeroMassSlice { axis, index })
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// One 1-d component per axis, mean zero under its marginal.
    pub components: Vec<GridFunction>,
    pub mu_star: f64,
    pub iterations: usize,
    /// Largest violation of the fixed-point identity over all components.
    pub residual_norm: f64,
}

impl ProjectionResult {
    pub fn sup_norms(&self) -> Vec<f64> {
        self.components.iter().map(GridFunction::sup_norm).collect()
    }

    /// `E f_k(X_k)²` for every component under the marginals of `dens`.
    pub fn l2_norms(&self, dens: &GridDensity) -> Vec<f64> {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| c.values.iter().zip(dens.marginal(k)).map(|(v, m)| v * v * m).sum())
            .collect()
    }
}

/// How a block update post-processes the conditional-mean residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockShape {
    Free,
    Convex,
}

struct Backfit<'a> {
    f: &'a GridFunction,
    dens: &'a GridDensity,
    layout: Layout,
    mu: f64,
    marginals: Vec<Vec<f64>>,
}

impl<'a> Backfit<'a> {
    fn new(f: &'a GridFunction, dens: &'a GridDensity) -> Result<Self> {
        dens.check_function(f)?;
        let marginals = (0..dens.ndim()).map(|k| dens.marginal(k)).collect();
        Ok(Self {
            f,
            dens,
            layout: dens.layout(),
            mu: dens.expectation(f)?,
            marginals,
        })
    }

    /// `E[f − Σ_{k'≠k} f_{k'} | x_k] − μ`.
    fn partial_residual(&self, comps: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
        let layout = self.layout;
        let mut h = self.dens.conditional(k, |i| {
            let mut v = self.f.values[i];
            for (d, c) in comps.iter().enumerate() {
                if d != k {
                    v -= c[layout.coord(i, d)];
                }
            }
            v
        })?;
        h.iter_mut().for_each(|v| *v -= self.mu);
        Ok(h)
    }

    fn update(&self, comps: &[Vec<f64>], k: usize, shape: BlockShape) -> Result<Vec<f64>> {
        let h = self.partial_residual(comps, k)?;
        let mut out = match shape {
            BlockShape::Free => h,
            BlockShape::Convex => {
                weighted_shape_projection(&self.dens.axes[k], &h, &self.marginals[k], 1.0, Some(&comps[k]))?
            }
        };
        let mean: f64 = out.iter().zip(&self.marginals[k]).map(|(v, m)| v * m).sum();
        out.iter_mut().for_each(|v| *v -= mean);
        Ok(out)
    }

    fn run(&self, shape: BlockShape, tol: f64, max_sweeps: usize) -> Result<ProjectionResult> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        let d = self.dens.ndim();
        let mut comps: Vec<Vec<f64>> = self.dens.axes.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut sweeps = 0;
        let mut defect = f64::INFINITY;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut change = 0.0f64;
            for k in 0..d {
                let new = self.update(&comps, k, shape)?;
                change = new.iter().zip(&comps[k]).fold(change, |m, (a, b)| m.max((a - b).abs()));
                comps[k] = new;
            }
            if change <= tol {
                defect = self.defect(&comps, shape)?;
                if defect <= tol {
                    break;
                }
            }
        }
        if !defect.is_finite() || defect > tol {
            defect = self.defect(&comps, shape)?;
            if defect > tol {
                return Err(Error::NonConvergence { sweeps, defect });
            }
        }
        let components = comps
            .into_iter()
            .enumerate()
            .map(|(k, v)| GridFunction::new(vec![self.dens.axes[k].clone()], v))
            .collect::<Result<_>>()?;
        Ok(ProjectionResult {
            components,
            mu_star: self.mu,
            iterations: sweeps,
            residual_norm: defect,
        })
    }

    fn defect(&self, comps: &[Vec<f64>], shape: BlockShape) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..comps.len() {
            let target = self.update(comps, k, shape)?;
            worst = target
                .iter()
                .zip(&comps[k])
                .fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
        Ok(worst)
    }
}

/// Additive projection of `f` in `L²(dens)` by backfitting: each sweep sets
/// `f_k ← E[f − Σ_{k'≠k} f_{k'} | x_k] − E f` until no grid value moves by
/// more than `tol`.
pub fn additive_projection_grid(
    f: &GridFunction,
    dens: &GridDensity,
    tol: f64,
    max_sweeps: usize,
) -> Result<ProjectionResult> {
    require_positive(dens)?;
    Backfit::new(f, dens)?.run(BlockShape::Free, tol, max_sweeps)
}

/// Projection onto sums of univariate convex functions. Each block update is
/// the convex projection of the conditional-mean residual under the marginal
/// weights.
pub fn convex_additive_projection_grid(
    f: &GridFunction,
    dens: &GridDensity,
    tol: f64,
    max_sweeps: usize,
) -> Result<ProjectionResult> {
    require_positive(dens)?;
    Backfit::new(f, dens)?.run(BlockShape::Convex, tol, max_sweeps)
}

fn require_positive(dens: &GridDensity) -> Result<()> {
    if !dens.is_positive() {
        return Err(Error::InvalidArgument(
            "projection needs a strictly positive density".into(),
        ));
    }
    Ok(())
}

/// Concave fit of the population residual on axis `k`: the projection of
/// `E[f − Σ_{k'} f*_{k'} | x_k] − μ*` onto concave functions in the
/// marginal-weighted norm. For a zeroed component (`f*_k = 0`) the sum is over
/// the other components only; including `f*_k` keeps the relevant
/// coordinates of an exactly additive convex `f` at zero as well.
pub fn decoupled_concave_projection_grid(
    f: &GridFunction,
    dens: &GridDensity,
    components: &ProjectionResult,
    k: usize,
) -> Result<GridFunction> {
    dens.check_axis(k)?;
    let fit = Backfit::new(f, dens)?;
    if components.components.len() != dens.ndim()
        || components
            .components
            .iter()
            .zip(&dens.axes)
            .any(|(c, a)| c.axes.len() != 1 || &c.axes[0] != a)
    {
        return Err(Error::DimensionMismatch(
            "components do not match the density grid".into(),
        ));
    }
    let comps: Vec<Vec<f64>> = components.components.iter().map(|c| c.values.clone()).collect();
    let mut h = fit.partial_residual(&comps, k)?;
    h.iter_mut().zip(&comps[k]).for_each(|(a, b)| *a -= b);
    let mut g = weighted_shape_projection(&dens.axes[k], &h, &fit.marginals[k], -1.0, None)?;
    let mean: f64 = g.iter().zip(&fit.marginals[k]).map(|(v, m)| v * m).sum();
    g.iter_mut().for_each(|v| *v -= mean);
    GridFunction::new(vec![dens.axes[k].clone()], g)
}

/// `argmin Σ_j m_j (h_j − g_j)²` over `g` whose slopes along `axis` are
/// nondecreasing (`sign = 1`) or nonincreasing (`sign = −1`).
fn weighted_shape_projection(
    axis: &[f64],
    h: &[f64],
    weights: &[f64],
    sign: f64,
    start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let m = h.len();
    let top = weights.iter().fold(0.0f64, |a, &b| a.max(b));
    let w: Vec<f64> = weights.iter().map(|v| v / top).collect();
    let p = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
    let q = DVector::from_iterator(m, h.iter().zip(&w).map(|(a, b)| -a * b));
    let mut g = DMatrix::zeros(m - 2, m);
    for j in 1..m - 1 {
        let left = 1.0 / (axis[j] - axis[j - 1]);
        let right = 1.0 / (axis[j + 1] - axis[j]);
        // −sign·(slope_right − slope_left) ≤ 0
        g[(j - 1, j - 1)] = -sign * left;
        g[(j - 1, j)] = sign * (left + right);
        g[(j - 1, j + 1)] = -sign * right;
    }
    let scale = g.abs().max();
    g /= scale;
    let prob = QpProblem::new(p, q).with_inequalities(g, DVector::zeros(m - 2));
    let settings = QpSettings {
        tol: 1e-11,
        max_iter: 50_000,
        initial_x: start.map(DVector::from_column_slice),
        ..QpSettings::default()
    };
    let sol = qp::solve_qp_with(&prob, &settings)?.into_optimal()?;
    Ok(sol.x.iter().copied().collect())
}

/// Coefficients `(a₁, a₂)` of the additive projection `a₁x₁² + a₂x₂²` (up to
/// constants) of `xᵀHx` under a standard bivariate Gaussian with correlation
/// `alpha`.
pub fn gaussian_quadratic_projection(h: [[f64; 2]; 2], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "correlation must lie in (−1, 1), got {alpha}"
        )));
    }
    if (h[0][1] - h[1][0]).abs() > 1e-12 * (1.0 + h[0][1].abs()) {
        return Err(Error::NotSymmetric((h[0][1] - h[1][0]).abs()));
    }
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if !(h[0][0] > 0.0 && det > 0.0) {
        let tr = h[0][0] + h[1][1];
        let min_eigenvalue = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue });
    }
    let a2 = alpha * alpha;
    let t1 = h[0][0] + 2.0 * h[0][1] * alpha + h[1][1] * a2;
    let t2 = h[1][1] + 2.0 * h[0][1] * alpha + h[0][0] * a2;
    let den = 1.0 - a2 * a2;
    Ok(((t1 - t2 * a2) / den, (t2 - t1 * a2) / den))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Example {
    /// `sin(2πx₁) sin(2πx₂)`, uniform on `[0,1]²`.
    EggCarton,
    /// `x₁x₂`, uniform on `[−1,1]×[0,1]`.
    TiltingSlope,
    /// `xᵀHx` under a bivariate Gaussian truncated to `[−b,b]²`.
    GaussianQuadratic,
    /// `xᵀHx` under `w·U[−(b+ε), b+ε]² + (1−w)·N_b(0, Σ)`.
    BoundaryFlatMixture,
}

impl std::str::FromStr for Example {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "eggcarton" => Ok(Example::EggCarton),
            "tiltingslope" => Ok(Example::TiltingSlope),
            "gaussianquadratic" => Ok(Example::GaussianQuadratic),
            "boundaryflatmixture" => Ok(Example::BoundaryFlatMixture),
            _ => Err(Error::InvalidArgument(format!("unknown example {s:?}"))),
        }
    }
}

impl Example {
    pub const ALL: [Example; 4] = [
        Example::EggCarton,
        Example::TiltingSlope,
        Example::GaussianQuadratic,
        Example::BoundaryFlatMixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Example::EggCarton => "egg-carton",
            Example::TiltingSlope => "tilting-slope",
            Example::GaussianQuadratic => "gaussian-quadratic",
            Example::BoundaryFlatMixture => "boundary-flat-mixture",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExampleParams {
    /// Points per axis; `None` picks 101 for the uniform examples and 201
    /// for the Gaussian ones.
    pub resolution: Option<usize>,
    pub h: [[f64; 2]; 2],
    pub alpha: f64,
    /// Truncation half-width of the Gaussian part.
    pub b: f64,
    /// Extra half-width of the uniform part of the mixture.
    pub epsilon: f64,
    /// Mixture weight of the uniform part.
    pub weight: f64,
}

impl Default for ExampleParams {
    fn default() -> Self {
        Self {
            resolution: None,
            h: [[1.6, 2.0], [2.0, 5.0]],
            alpha: -0.5,
            b: 5.0,
            epsilon: 0.3,
            weight: 1e-4,
        }
    }
}

pub fn canonical_example(example: Example, params: &ExampleParams) -> Result<(GridFunction, GridDensity)> {
    let gaussian = matches!(example, Example::GaussianQuadratic | Example::BoundaryFlatMixture);
    let m = params.resolution.unwrap_or(if gaussian { 201 } else { 101 });
    if m < 3 {
        return Err(Error::InvalidArgument("resolution must be at least 3".into()));
    }
    if gaussian {
        if !(params.alpha.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (−1, 1), got {}",
                params.alpha
            )));
        }
        if !(params.b > 0.0) {
            return Err(Error::InvalidArgument("b must be positive".into()));
        }
    }
    let h = params.h;
    let quadratic = move |x: &[f64]| h[0][0] * x[0] * x[0] + 2.0 * h[0][1] * x[0] * x[1] + h[1][1] * x[1] * x[1];
    let alpha = params.alpha;
    let gauss = move |x: &[f64]| {
        let q = (x[0] * x[0] - 2.0 * alpha * x[0] * x[1] + x[1] * x[1]) / (1.0 - alpha * alpha);
        (-0.5 * q).exp()
    };
    match example {
        Example::EggCarton => {
            let axes = vec![uniform_axis(0.0, 1.0, m), uniform_axis(0.0, 1.0, m)];
            let tau = std::f64::consts::TAU;
            let f = GridFunction::from_fn(axes.clone(), |x| (tau * x[0]).sin() * (tau * x[1]).sin())?;
            Ok((f, GridDensity::uniform(axes)?))
        }
        Example::TiltingSlope => {
            let axes = vec![uniform_axis(-1.0, 1.0, m), uniform_axis(0.0, 1.0, m)];
            let f = GridFunction::from_fn(axes.clone(), |x| x[0] * x[1])?;
            Ok((f, GridDensity::uniform(axes)?))
        }
        Example::GaussianQuadratic => {
            let axes = vec![
                uniform_axis(-params.b, params.b, m),
                uniform_axis(-params.b, params.b, m),
            ];
            let f = GridFunction::from_fn(axes.clone(), quadratic)?;
            Ok((f, GridDensity::from_fn(axes, gauss)?))
        }
        Example::BoundaryFlatMixture => {
            if !(params.epsilon > 0.0) || !(params.weight > 0.0 && params.weight <= 1.0) {
                return Err(Error::InvalidArgument(
                    "mixture needs epsilon > 0 and weight in (0, 1]".into(),
                ));
            }
            let half = params.b + params.epsilon;
            let axes = vec![uniform_axis(-half, half, m), uniform_axis(-half, half, m)];
            let b = params.b;
            let truncated = GridDensity::from_fn(axes.clone(), |x| {
                if x[0].abs() <= b && x[1].abs() <= b {
                    gauss(x)
                } else {
                    0.0
                }
            })?;
            let uniform = GridDensity::uniform(axes.clone())?;
            let w = params.weight;
            let mixed = uniform
                .weights
                .iter()
                .zip(&truncated.weights)
                .map(|(u, g)| w * u + (1.0 - w) * g)
                .collect();
            let f = GridFunction::from_fn(axes.clone(), quadratic)?;
            Ok((f, GridDensity::new(axes, mixed)?))
        }
    }
}
