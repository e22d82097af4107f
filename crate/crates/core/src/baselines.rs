//! Comparison methods: the dense Gaussian state-space smoother and the expanding-window LASSO.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{CoefPath, Dataset};
use crate::error::{DssError, Result};
use crate::rng;

const DLM_RESIDUAL_TOL: f64 = 1e-8;
const LASSO_KKT_TOL: f64 = 1e-6;
const LASSO_MAX_SWEEPS: usize = 20_000;
/// Training residual share below which a CV path stops descending the penalty grid.
const SATURATION: f64 = 1e-3;
const LAMBDA_GRID: usize = 100;
const LAMBDA_RATIO: f64 = 1e-4;

/// MAP path of the all-slab model: Gaussian likelihood, Gaussian AR(1) transitions with variance
/// `lambda1` and the stationary Gaussian law on `β_0`.
///
/// The normal equations are block tridiagonal in `t` with `p × p` blocks and are solved by block
/// forward elimination and back substitution.
pub fn dlm_fit(data: &Dataset, phi1: f64, lambda1: f64) -> Result<CoefPath> {
    if !(phi1.abs() < 1.0) {
        return Err(DssError::ParameterDomain(format!("|phi1| must be below 1, got {phi1}")));
    }
    if !(lambda1 > 0.0 && lambda1.is_finite()) {
        return Err(DssError::ParameterDomain(format!("lambda1 must be positive, got {lambda1}")));
    }
    let (p, horizon) = (data.predictors(), data.horizon());
    let identity = DMatrix::<f64>::identity(p, p);
    let coupling = phi1 / lambda1;

    let diagonal = |t: usize| -> DMatrix<f64> {
        if t == 0 {
            return &identity / lambda1;
        }
        let x = data.design().row(t - 1).transpose();
        let prior = if t < horizon { (1.0 + phi1 * phi1) / lambda1 } else { 1.0 / lambda1 };
        &x * x.transpose() + &identity * prior
    };
    let rhs = |t: usize| -> DVector<f64> {
        if t == 0 {
            DVector::zeros(p)
        } else {
            data.design().row(t - 1).transpose() * data.responses()[t - 1]
        }
    };

    let factor = |m: DMatrix<f64>, t: usize| -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(m).ok_or_else(|| DssError::Singular(format!("pivot block at t = {t} is not positive definite")))
    };

    let mut factors: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(horizon + 1);
    let mut reduced: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    factors.push(factor(diagonal(0), 0)?);
    reduced.push(rhs(0));
    for t in 1..=horizon {
        let prev = &factors[t - 1];
        let schur = diagonal(t) - prev.inverse() * (coupling * coupling);
        let r = rhs(t) + prev.solve(&reduced[t - 1]) * coupling;
        factors.push(factor(schur, t)?);
        reduced.push(r);
    }

    let mut states = vec![DVector::zeros(p); horizon + 1];
    states[horizon] = factors[horizon].solve(&reduced[horizon]);
    for t in (0..horizon).rev() {
        let r = &reduced[t] + &states[t + 1] * coupling;
        states[t] = factors[t].solve(&r);
    }

    // verify against the original system
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for t in 0..=horizon {
        let mut lhs = diagonal(t) * &states[t];
        if t > 0 {
            lhs -= &states[t - 1] * coupling;
        }
        if t < horizon {
            lhs -= &states[t + 1] * coupling;
        }
        let b = rhs(t);
        scale = scale.max(b.amax());
        worst = worst.max((lhs - b).amax());
    }
    if !(worst <= DLM_RESIDUAL_TOL * scale) {
        return Err(DssError::Singular(format!("normal-equation residual {worst:e} after the block solve")));
    }

    let mut coefficients = DMatrix::zeros(p, horizon);
    for (t, state) in states.iter().skip(1).enumerate() {
        coefficients.set_column(t, state);
    }
    CoefPath::new(states[0].clone(), coefficients)
}

/// Static LASSO solution `argmin ½‖y - Xβ‖² + λ‖β‖₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// Largest violation of the optimality conditions at the returned point.
    pub kkt_residual: f64,
}

fn soft(value: f64, level: f64) -> f64 {
    if value > level {
        value - level
    } else if value < -level {
        value + level
    } else {
        0.0
    }
}

fn kkt_residual(x: &DMatrix<f64>, residual: &DVector<f64>, beta: &[f64], lambda: f64) -> f64 {
    (0..x.ncols())
        .map(|j| {
            let g = x.column(j).dot(residual);
            if beta[j] != 0.0 {
                (g - lambda * beta[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn check_lasso_inputs(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(DssError::EmptyInput("LASSO design is empty".into()));
    }
    if x.nrows() != y.len() {
        return Err(DssError::Dimension(format!("{} responses for {} design rows", y.len(), x.nrows())));
    }
    if !y.iter().chain(x.iter()).all(|v| v.is_finite()) {
        return Err(DssError::Dimension("LASSO inputs must be finite".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(DssError::ParameterDomain(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Cyclic coordinate descent from `start`, alternating full sweeps with sweeps over the
/// current support until the optimality conditions hold to `1e-6`.
pub fn lasso_fit_from(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64, start: &[f64]) -> Result<LassoFit> {
    check_lasso_inputs(y, x, lambda)?;
    let p = x.ncols();
    if start.len() != p {
        return Err(DssError::Dimension("warm start has the wrong length".into()));
    }
    let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared()).collect();
    let mut beta = start.to_vec();
    let mut residual = y - x * DVector::from_column_slice(&beta);

    let update = |j: usize, beta: &mut Vec<f64>, residual: &mut DVector<f64>| -> f64 {
        if norms[j] == 0.0 {
            return 0.0;
        }
        let col = x.column(j);
        let rho = col.dot(residual) + norms[j] * beta[j];
        let new = soft(rho, lambda) / norms[j];
        let delta = new - beta[j];
        if delta != 0.0 {
            residual.axpy(-delta, &col, 1.0);
            beta[j] = new;
        }
        delta.abs() * norms[j].sqrt()
    };

    let mut sweeps = 0;
    loop {
        for j in 0..p {
            update(j, &mut beta, &mut residual);
        }
        sweeps += 1;
        // settle the support before the next full pass
        loop {
            let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, &mut beta, &mut residual));
            }
            sweeps += 1;
            if change < 0.1 * LASSO_KKT_TOL || sweeps >= LASSO_MAX_SWEEPS {
                break;
            }
        }
        // recompute to avoid drift before the optimality check
        residual = y - x * DVector::from_column_slice(&beta);
        let kkt = kkt_residual(x, &residual, &beta, lambda);
        if kkt < LASSO_KKT_TOL {
            return Ok(LassoFit {
                coefficients: beta,
                lambda,
                kkt_residual: kkt,
            });
        }
        if sweeps >= LASSO_MAX_SWEEPS {
            return Err(DssError::NotConverged(format!(
                "LASSO KKT residual {kkt:e} after {sweeps} sweeps"
            )));
        }
    }
}

pub fn lasso_fit(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64) -> Result<LassoFit> {
    lasso_fit_from(y, x, lambda, &vec![0.0; x.ncols()])
}

/// `max_j |X_j' y|`, the smallest penalty with an all-zero solution.
pub fn lambda_max(y: &DVector<f64>, x: &DMatrix<f64>) -> f64 {
    (0..x.ncols()).map(|j| x.column(j).dot(y).abs()).fold(0.0, f64::max)
}

/// 100 log-spaced penalties from `lambda_max` down to `1e-4 · lambda_max`.
pub fn lambda_grid(lambda_max: f64) -> Vec<f64> {
    let (hi, lo) = (lambda_max.ln(), (lambda_max * LAMBDA_RATIO).ln());
    (0..LAMBDA_GRID)
        .map(|k| (hi + (lo - hi) * k as f64 / (LAMBDA_GRID - 1) as f64).exp())
        .collect()
}

fn select_rows(y: &DVector<f64>, x: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let xs = DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)]);
    (ys, xs)
}

/// Fold label of each row: a seeded random permutation dealt round-robin into `folds` groups.
pub fn fold_assignment(rows: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng::stream(seed, 11));
    let mut labels = vec![0; rows];
    for (position, &row) in order.iter().enumerate() {
        labels[row] = position % folds;
    }
    labels
}

/// LASSO with the penalty chosen by K-fold cross-validation on held-out squared error, then refit
/// on all rows. A fold's path stops early once its training fit explains 99.9% of the response
/// sum of squares or the solver stalls; only penalties reached by every fold are candidates.
pub fn lasso_cv(y: &DVector<f64>, x: &DMatrix<f64>, folds: usize, seed: u64) -> Result<LassoFit> {
    check_lasso_inputs(y, x, 1.0)?;
    let n = y.len();
    if folds < 2 || folds > n {
        return Err(DssError::Configuration(format!("{folds}-fold CV needs between 2 and {n} folds")));
    }
    let top = lambda_max(y, x);
    if top == 0.0 {
        // every penalty gives the zero solution
        return lasso_fit(y, x, 1.0);
    }
    let grid = lambda_grid(top);
    let labels = fold_assignment(n, folds, seed);
    let mut cv_error = vec![0.0; grid.len()];
    // penalties every fold reached before its path was cut short
    let mut usable = grid.len();
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
        let (ytr, xtr) = select_rows(y, x, &train);
        let (yte, xte) = select_rows(y, x, &test);
        let null_deviance = ytr.norm_squared();
        let mut warm = vec![0.0; x.ncols()];
        let mut reached = 0;
        for (k, &lambda) in grid.iter().enumerate().take(usable) {
            let fit = match lasso_fit_from(&ytr, &xtr, lambda, &warm) {
                Ok(fit) => fit,
                Err(DssError::NotConverged(_)) => break,
                Err(e) => return Err(e),
            };
            let beta = DVector::from_column_slice(&fit.coefficients);
            cv_error[k] += (&yte - &xte * &beta).norm_squared();
            reached = k + 1;
            // a saturated training fit ends the path
            if (&ytr - &xtr * &beta).norm_squared() <= SATURATION * null_deviance {
                break;
            }
            warm = fit.coefficients;
        }
        usable = usable.min(reached);
    }
    if usable == 0 {
        return Err(DssError::NotConverged("no penalty completed in every fold".into()));
    }
    cv_error.truncate(usable);
    let best = cv_error
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("non-empty grid");
    // walk the path on the full data for a good warm start
    let mut warm = vec![0.0; x.ncols()];
    for &lambda in &grid[..best] {
        warm = lasso_fit_from(y, x, lambda, &warm)?.coefficients;
    }
    lasso_fit_from(y, x, grid[best], &warm)
}

/// First time index refit by the expanding-window LASSO.
pub fn expanding_start(folds: usize) -> usize {
    20.max(folds + 10)
}

/// Expanding-window LASSO: column `t` holds the cross-validated fit on rows `1..t`. Columns before
/// the first refit copy it; `β_0` is zero.
pub fn lasso_expanding_path(data: &Dataset, folds: usize, seed: u64) -> Result<CoefPath> {
    let horizon = data.horizon();
    let start = expanding_start(folds).min(horizon);
    if folds < 2 || start < folds + 1 {
        return Err(DssError::Configuration(format!(
            "{folds}-fold CV needs at least {} observations, got {horizon}",
            folds + 1
        )));
    }
    let fits: Vec<Result<LassoFit>> = (start..=horizon)
        .into_par_iter()
        .map(|t| {
            let y = data.responses().rows(0, t).into_owned();
            let x = data.design().rows(0, t).into_owned();
            lasso_cv(&y, &x, folds, rng::child_seed(seed, t as u64))
        })
        .collect();
    let p = data.predictors();
    let mut coefficients = DMatrix::zeros(p, horizon);
    for (offset, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        let t = start + offset;
        let column = DVector::from_column_slice(&fit.coefficients);
        if t == start {
            for early in 1..start {
                coefficients.set_column(early - 1, &column);
            }
        }
        coefficients.set_column(t - 1, &column);
    }
    CoefPath::new(DVector::zeros(p), coefficients)
}
