#![allow(dead_code)]

use acdc_core::qp::QpProblem;
use acdc_core::rng::Rng;
use nalgebra::{DMatrix, DVector};

/// Exhaustive active-set oracle: every subset of inequality rows is held at
/// equality, the resulting linear system is solved, and the primal-feasible
/// candidate with the smallest objective wins.
pub fn active_set_oracle(prob: &QpProblem) -> Option<DVector<f64>> {
    let m = prob.q.len();
    let me = prob.a.nrows();
    let mi = prob.g.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << mi) {
        let rows: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
        let k = me + rows.len();
        let mut kkt = DMatrix::zeros(m + k, m + k);
        kkt.view_mut((0, 0), (m, m)).copy_from(&prob.p);
        let mut rhs = DVector::zeros(m + k);
        rhs.rows_mut(0, m).copy_from(&(-&prob.q));
        for r in 0..k {
            let (row, val) = if r < me {
                (prob.a.row(r).clone_owned(), prob.b[r])
            } else {
                (prob.g.row(rows[r - me]).clone_owned(), prob.h[rows[r - me]])
            };
            for j in 0..m {
                kkt[(m + r, j)] = row[j];
                kkt[(j, m + r)] = row[j];
            }
            rhs[m + r] = val;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, m).into_owned();
        let scale = 1.0 + x.amax();
        if (&prob.a * &x - &prob.b).iter().any(|v| v.abs() > 1e-9 * scale) {
            continue;
        }
        if (&prob.g * &x - &prob.h).iter().any(|&v| v > 1e-9 * scale) {
            continue;
        }
        let obj = prob.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Random strictly convex QP with `m ≤ 6` variables, at most 4 inequality
/// rows, and a feasible point built in.
pub fn random_qp(rng: &mut Rng) -> QpProblem {
    let m = 1 + rng.below(6) as usize;
    let me = rng.below(m.min(3) as u64) as usize;
    let mi = rng.below(5) as usize;
    let l = DMatrix::from_fn(m, m, |_, _| rng.normal());
    let p = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
    let q = DVector::from_fn(m, |_, _| 3.0 * rng.normal());
    let x0 = DVector::from_fn(m, |_, _| rng.normal());
    let a = DMatrix::from_fn(me, m, |_, _| rng.normal());
    let b = &a * &x0;
    let g = DMatrix::from_fn(mi, m, |_, _| rng.normal());
    let slack = DVector::from_fn(mi, |_, _| if rng.bernoulli(0.3) { 0.0 } else { rng.uniform() });
    let h = &g * &x0 + slack;
    QpProblem::new(p, q).with_equalities(a, b).with_inequalities(g, h)
}

/// Least-squares projection of `r − r̄` onto centered convex sequences on the
/// distinct points `x`, by enumerating which hinge coefficients are free.
/// Works for `n ≤ 12`.
pub fn convex_projection_oracle(x: &[f64], r: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let centre = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / n as f64;
        v.into_iter().map(|a| a - m).collect::<Vec<f64>>()
    };
    let target = DVector::from_vec(centre(r.to_vec()));
    // columns in sample order: linear, then hinges at interior sorted points
    let linear = centre(x.to_vec());
    let hinges: Vec<Vec<f64>> = (1..n - 1)
        .map(|j| centre(x.iter().map(|&v| (v - xs[j]).max(0.0)).collect()))
        .collect();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << hinges.len()) {
        let mut cols = vec![linear.clone()];
        cols.extend(
            (0..hinges.len())
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| hinges[j].clone()),
        );
        let design = DMatrix::from_fn(n, cols.len(), |i, c| cols[c][i]);
        let gram = design.transpose() * &design;
        let Some(coef) = gram.clone().lu().solve(&(design.transpose() * &target)) else {
            continue;
        };
        if coef.iter().skip(1).any(|&c| c < -1e-12) || coef.iter().any(|c| !c.is_finite()) {
            continue;
        }
        let fit = &design * &coef;
        let err = (&target - &fit).norm_squared();
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, fit));
        }
    }
    best.expect("the linear-only subset is always feasible")
        .1
        .iter()
        .copied()
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
