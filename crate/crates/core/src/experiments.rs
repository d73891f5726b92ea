//! Simulation harness: synthetic quadratic-form data, support-recovery
//! curves, regularization paths and cross-validated prediction error.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{self, AcOptions, AdditiveModel};
use crate::rng::Rng;
use crate::shape::{Shape, ZERO_THRESHOLD};
use crate::{Error, Result};

/// Eigenvalue floor applied to randomly generated Q matrices.
pub const Q_EIGEN_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Design {
    Identity,
    /// `Σ_ij = ν^|i−j|`.
    Ar {
        nu: f64,
    },
}

/// `y = x_Sᵀ Q x_S + σ ε` with `x ~ N(0, Σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// Relevant coordinates, 0-based.
    pub relevant: Vec<usize>,
    /// Row-major `s × s` matrix.
    pub q: Vec<Vec<f64>>,
    pub design: Design,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Identity design with `Q = I` on the first `s` coordinates.
    pub fn identity(n: usize, p: usize, s: usize, noise_sd: f64, seed: u64) -> Self {
        let q = (0..s)
            .map(|i| (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            n,
            p,
            relevant: (0..s).collect(),
            q,
            design: Design::Identity,
            noise_sd,
            seed,
        }
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        let s = self.q.len();
        DMatrix::from_fn(s, s, |i, j| self.q[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.relevant.len();
        if self.n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: self.n });
        }
        if self.p == 0 {
            return Err(Error::InvalidArgument("p must be positive".into()));
        }
        let mut seen = vec![false; self.p];
        for &k in &self.relevant {
            if k >= self.p {
                return Err(Error::CoordinateOutOfRange { index: k, p: self.p });
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidArgument(format!("relevant coordinate {k} listed twice")));
            }
        }
        if self.q.len() != s || self.q.iter().any(|row| row.len() != s) {
            return Err(Error::DimensionMismatch(format!(
                "Q must be {s}×{s} to match the relevant set"
            )));
        }
        if s > 0 {
            let q = self.q_matrix();
            let asym = (&q - q.transpose()).amax();
            if asym > 1e-12 * (1.0 + q.amax()) {
                return Err(Error::NotSymmetric(asym));
            }
            let min_eig = q.symmetric_eigenvalues().min();
            if !(min_eig > 0.0) {
                return Err(Error::NotPositiveSemidefinite {
                    min_eigenvalue: min_eig,
                });
            }
        }
        if let Design::Ar { nu } = self.design {
            if !(0.0..1.0).contains(&nu) {
                return Err(Error::InvalidArgument(format!(
                    "AR parameter must lie in [0, 1), got {nu}"
                )));
            }
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidArgument("noise_sd must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Draws a dataset using the stream `Rng::new(cfg.seed)`.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    simulate_with(cfg, &mut Rng::new(cfg.seed))
}

/// Row by row: `p` standard normals mapped through the design's Cholesky
/// factor, then one noise draw.
pub fn simulate_with(cfg: &SimConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    let (n, p) = (cfg.n, cfg.p);
    let chol = match cfg.design {
        Design::Identity => None,
        Design::Ar { nu } => {
            let sigma = DMatrix::from_fn(p, p, |i, j| nu.powi(i.abs_diff(j) as i32));
            let l = sigma
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("AR covariance is not positive definite".into()))?
                .l();
            Some(l)
        }
    };
    let q = cfg.q_matrix();
    let s = cfg.relevant.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; p];
    let mut xs = vec![0.0; s];
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = rng.normal());
        for k in 0..p {
            x[(i, k)] = match &chol {
                None => z[k],
                Some(l) => (0..=k).map(|j| l[(k, j)] * z[j]).sum(),
            };
        }
        for (a, &k) in cfg.relevant.iter().enumerate() {
            xs[a] = x[(i, k)];
        }
        let mut quad = 0.0;
        for a in 0..s {
            for b in 0..s {
                quad += xs[a] * q[(a, b)] * xs[b];
            }
        }
        y[i] = quad + cfg.noise_sd * rng.normal();
    }
    let names = (1..=p).map(|k| format!("x{k}")).collect();
    Dataset::new(x, y, names)
}

/// Ones on the diagonal, `1/2` off the diagonal with probability `prob`
/// (symmetric), then eigenvalues below [`Q_EIGEN_FLOOR`] raised to it.
pub fn generate_q(s: usize, prob: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut q = DMatrix::identity(s, s);
    for i in 0..s {
        for j in i + 1..s {
            if rng.bernoulli(prob) {
                q[(i, j)] = 0.5;
                q[(j, i)] = 0.5;
            }
        }
    }
    if s > 0 {
        let eig = q.clone().symmetric_eigen();
        if eig.eigenvalues.min() < Q_EIGEN_FLOOR {
            let floored = eig.eigenvalues.map(|v: f64| v.max(Q_EIGEN_FLOOR));
            let v = &eig.eigenvectors;
            q = v * DMatrix::from_diagonal(&floored) * v.transpose();
            q = (&q + q.transpose()) * 0.5;
        }
    }
    (0..s).map(|i| (0..s).map(|j| q[(i, j)]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n: usize,
    pub p: usize,
    pub trials: usize,
    pub successes: usize,
    pub exact_recovery_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTable {
    pub rows: Vec<RecoveryRow>,
}

/// Exact-recovery frequency at each sample size, screening with
/// [`engine::default_lambda`] and the standard zero threshold. Trial `t` at
/// grid position `g` draws from stream `(g << 32) | t` of `base.seed`.
pub fn recovery_curve(base: &SimConfig, n_grid: &[usize], trials: usize) -> Result<RecoveryTable> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let mut relevant = base.relevant.clone();
    relevant.sort_unstable();
    let mut rows = Vec::with_capacity(n_grid.len());
    for (g, &n) in n_grid.iter().enumerate() {
        let cfg = SimConfig { n, ..base.clone() };
        cfg.validate()?;
        let outcomes: Vec<Result<bool>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = Rng::with_stream(cfg.seed, ((g as u64) << 32) | t as u64);
                let ds = simulate_with(&cfg, &mut rng)?;
                let report = engine::screen(&ds, engine::default_lambda(n, cfg.p), ZERO_THRESHOLD)?;
                Ok(report.selected == relevant)
            })
            .collect();
        let mut successes = 0;
        for o in outcomes {
            successes += usize::from(o?);
        }
        log::info!("n = {n}: {successes}/{trials} exact recoveries");
        rows.push(RecoveryRow {
            n,
            p: cfg.p,
            trials,
            successes,
            exact_recovery_rate: successes as f64 / trials as f64,
        });
    }
    Ok(RecoveryTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    /// Strictly increasing.
    pub lambdas: Vec<f64>,
    pub ac_norms: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
    /// `Σ_k ‖f̂_k‖∞` relative to its value at the smallest λ.
    pub normalized_norm: Vec<f64>,
    /// Steps where the selected set grew as λ increased.
    pub monotonicity_violations: Vec<usize>,
}

pub fn check_lambda_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(
            "lambda grid values must be finite and nonnegative".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("lambda grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Screens at every grid value, from the largest λ down, warm-starting each
/// fit from the previous one.
pub fn regularization_path(ds: &Dataset, lambda_grid: &[f64], base: &AcOptions, threshold: f64) -> Result<PathResult> {
    check_lambda_grid(lambda_grid)?;
    let m = lambda_grid.len();
    let mut ac_norms = vec![Vec::new(); m];
    let mut selected = vec![Vec::new(); m];
    let mut warm: Option<AdditiveModel> = None;
    for t in (0..m).rev() {
        let opts = AcOptions {
            lambda: lambda_grid[t],
            ..*base
        };
        let run = engine::screen_with(ds, &opts, threshold, warm.as_ref())?;
        ac_norms[t] = run.report.ac_norms.clone();
        selected[t] = run.report.selected.clone();
        warm = Some(run.model);
    }
    let total = |norms: &Vec<f64>| norms.iter().sum::<f64>();
    let base_norm = total(&ac_norms[0]);
    let normalized_norm = ac_norms
        .iter()
        .map(|a| if base_norm > 0.0 { total(a) / base_norm } else { 0.0 })
        .collect();
    let monotonicity_violations: Vec<usize> = (1..m).filter(|&t| selected[t].len() > selected[t - 1].len()).collect();
    if !monotonicity_violations.is_empty() {
        log::warn!("selected-set size increased with lambda at steps {monotonicity_violations:?}");
    }
    Ok(PathResult {
        lambdas: lambda_grid.to_vec(),
        ac_norms,
        selected,
        normalized_norm,
        monotonicity_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub lambda: f64,
    pub mse_mean: f64,
    /// Sample standard deviation over all train/test evaluations.
    pub mse_sd: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
}

impl CvTable {
    pub fn best(&self) -> Option<&CvRow> {
        self.rows.iter().min_by(|a, b| a.mse_mean.total_cmp(&b.mse_mean))
    }
}

/// Test-fold membership for one repeat: shuffle `0..n` with stream `repeat`
/// of `seed`, then deal the shuffled indices round-robin into folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64, repeat: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, repeat as u64).shuffle(&mut order);
    let mut out = vec![Vec::new(); folds];
    for (pos, &i) in order.iter().enumerate() {
        out[pos % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// Repeated k-fold error of screen-then-refit. Each training split is
/// screened at λ, the selected coordinates are refit without penalty
/// (convex where the AC stage kept them, concave where only the DC stage
/// did), and the held-out squared error of the refit is recorded. An empty
/// selection predicts the training mean.
pub fn cross_validate(
    ds: &Dataset,
    folds: usize,
    lambda_grid: &[f64],
    repeats: usize,
    seed: u64,
    base: &AcOptions,
) -> Result<CvTable> {
    let n = ds.n();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must lie in 2..={n}, got {folds}"
        )));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    check_lambda_grid(lambda_grid)?;
    let splits: Vec<(usize, Vec<usize>)> = (0..repeats)
        .flat_map(|r| fold_assignment(n, folds, seed, r).into_iter().map(move |f| (r, f)))
        .collect();
    let per_split: Vec<Result<Vec<f64>>> = splits
        .par_iter()
        .map(|(_, test)| {
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
            let train_ds = ds.select_rows(&train)?;
            lambda_grid
                .iter()
                .map(|&lambda| {
                    let opts = AcOptions { lambda, ..*base };
                    fold_error(ds, &train_ds, test, &opts)
                })
                .collect()
        })
        .collect();
    let errors: Vec<Vec<f64>> = per_split.into_iter().collect::<Result<_>>()?;
    let evaluations = errors.len();
    let rows = lambda_grid
        .iter()
        .enumerate()
        .map(|(t, &lambda)| {
            let vals: Vec<f64> = errors.iter().map(|e| e[t]).collect();
            let mean = vals.iter().sum::<f64>() / evaluations as f64;
            let var = if evaluations > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (evaluations - 1) as f64
            } else {
                0.0
            };
            CvRow {
                lambda,
                mse_mean: mean,
                mse_sd: var.sqrt(),
                evaluations,
            }
        })
        .collect();
    Ok(CvTable { rows })
}

fn fold_error(full: &Dataset, train: &Dataset, test: &[usize], opts: &AcOptions) -> Result<f64> {
    let run = engine::screen_with(train, opts, ZERO_THRESHOLD, None)?;
    let shapes: Vec<(usize, Shape)> = run
        .report
        .selected
        .iter()
        .map(|&k| {
            let shape = if run.report.ac_norms[k] > ZERO_THRESHOLD {
                Shape::Convex
            } else {
                Shape::Concave
            };
            (k, shape)
        })
        .collect();
    let refit_opts = AcOptions { lambda: 0.0, ..*opts };
    let refit = engine::fit_additive(train, &shapes, &refit_opts, None)?;
    let sse: f64 = test
        .iter()
        .map(|&i| {
            let pred = refit.predict(&full.row(i));
            (full.y()[i] - pred).powi(2)
        })
        .sum();
    Ok(sse / test.len() as f64)
}
