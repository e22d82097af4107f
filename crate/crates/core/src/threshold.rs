//! Selection thresholds and the exact one-site MAP solution under the dynamic penalty.
//!
//! Conditionally on its neighbours, a single coefficient maximises
//! `-(z - xβ)²/2 + Pen(β | β_prev, β_next)`. Its solution is exactly zero when `Z = x z` falls
//! inside the band `[Δ-, Δ+]`, where
//!
//! ```text
//! Δ+ = inf_{β>0} { β x²/2 - Pen(β)/β },    Δ- = sup_{β<0} { β x²/2 - Pen(β)/β }
//! ```
//!
//! (`Pen` is the normed log-prior, so it enters with a minus sign.) Neither the band nor the
//! nonzero solution has a closed form, so both are found numerically: dense grid, then
//! golden-section refinement of the best brackets. This is a reference oracle for the EM
//! smoother, not a production fitter.

use serde::{Deserialize, Serialize};

use crate::densities::DssParams;
use crate::error::{DssError, Result};
use crate::penalty::{total_pen, total_shrinkage};

const GRID_POINTS: usize = 4001;
const REFINED_BRACKETS: usize = 3;
const GOLDEN_WIDTH: f64 = 1e-10;
const TIE_TOLERANCE: f64 = 1e-12;
const ZERO_GAP: f64 = 1e-8;

/// Lower and upper selection thresholds; the zero decision band is `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub lower: f64,
    pub upper: f64,
}

impl ThresholdPair {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`.
pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, width: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut guard = 0;
    while (b - a).abs() > width && guard < 200 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        guard += 1;
    }
    // keep the best of the probes and the bracket ends
    [(a, f(a)), (c, fc), (d, fd), (b, f(b))]
        .into_iter()
        .max_by(|l, r| l.1.total_cmp(&r.1))
        .expect("non-empty")
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Maximise `f` over `[lo, hi]`: grid scan, then golden-section on the best local-max brackets.
fn grid_refine_max<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> (f64, f64) {
    let grid = linspace(lo, hi, GRID_POINTS);
    let values: Vec<f64> = grid.iter().map(|&b| f(b)).collect();
    let n = grid.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || values[i] >= values[i - 1];
            let right = i + 1 == n || values[i] >= values[i + 1];
            left && right
        })
        .collect();
    peaks.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    peaks.truncate(REFINED_BRACKETS);
    peaks
        .into_iter()
        .map(|i| {
            let a = grid[i.saturating_sub(1)];
            let b = grid[(i + 1).min(n - 1)];
            let refined = golden_section_max(f, a, b, GOLDEN_WIDTH);
            if refined.1 >= values[i] {
                refined
            } else {
                (grid[i], values[i])
            }
        })
        .max_by(|l, r| l.1.total_cmp(&r.1))
        .expect("grid has at least one peak")
}

fn search_radius(params: &DssParams, extra: f64) -> f64 {
    params.phi0.abs() + 6.0 * params.stationary_variance().sqrt() + extra
}

/// Selection thresholds `(Δ-, Δ+)` for regressor value `x` given the neighbouring coefficients.
pub fn selection_thresholds(
    x: f64,
    beta_prev: f64,
    beta_next: f64,
    params: &DssParams,
) -> Result<ThresholdPair> {
    if x == 0.0 || !x.is_finite() {
        return Err(DssError::DegenerateDesign);
    }
    let g = |b: f64| b * x * x / 2.0 - total_pen(b, beta_prev, beta_next, params) / b;
    let mut radius = search_radius(params, beta_prev.abs() + beta_next.abs());

    // Δ+ : infimum over β > 0; widen the window while the minimum sits on its far edge
    let mut upper = (0.0, 0.0);
    for _ in 0..12 {
        upper = grid_refine_max(&|b: f64| -g(b), ZERO_GAP, radius);
        if upper.0 < radius * (1.0 - 1e-3) {
            break;
        }
        radius *= 2.0;
    }
    let mut radius = search_radius(params, beta_prev.abs() + beta_next.abs());
    let mut lower = (0.0, 0.0);
    for _ in 0..12 {
        lower = grid_refine_max(&g, -radius, -ZERO_GAP);
        if lower.0 > -radius * (1.0 - 1e-3) {
            break;
        }
        radius *= 2.0;
    }
    Ok(ThresholdPair {
        lower: lower.1,
        upper: -upper.1,
    })
}

/// The one-site objective `-(z - xβ)²/2 + Pen(β | β_prev, β_next)`.
pub fn one_site_objective(
    beta: f64,
    z: f64,
    x: f64,
    beta_prev: f64,
    beta_next: f64,
    params: &DssParams,
) -> f64 {
    let r = z - x * beta;
    -0.5 * r * r + total_pen(beta, beta_prev, beta_next, params)
}

fn one_site_derivative(beta: f64, z: f64, x: f64, beta_prev: f64, beta_next: f64, params: &DssParams) -> f64 {
    let shrink = total_shrinkage(beta, beta_prev, beta_next, params)
        .map(|s| s.total)
        .unwrap_or(0.0);
    x * (z - x * beta) - shrink * beta.signum()
}

/// Bisection polish on the objective's derivative around a golden-section estimate.
fn polish(beta: f64, z: f64, x: f64, beta_prev: f64, beta_next: f64, params: &DssParams) -> f64 {
    let deriv = |b: f64| one_site_derivative(b, z, x, beta_prev, beta_next, params);
    let half = 1e-7 * (1.0 + beta.abs());
    let (mut lo, mut hi) = (beta - half, beta + half);
    if beta > 0.0 {
        lo = lo.max(f64::MIN_POSITIVE);
    } else {
        hi = hi.min(-f64::MIN_POSITIVE);
    }
    let (dlo, dhi) = (deriv(lo), deriv(hi));
    if !(dlo > 0.0 && dhi < 0.0) {
        return beta;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if deriv(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Global maximiser of the one-site objective. Returns exactly zero unless a nonzero value beats
/// zero by more than a `1e-12` tie margin.
pub fn one_site_map(
    z: f64,
    x: f64,
    beta_prev: f64,
    beta_next: f64,
    params: &DssParams,
) -> Result<f64> {
    if x == 0.0 || !x.is_finite() {
        return Err(DssError::DegenerateDesign);
    }
    let f = |b: f64| one_site_objective(b, z, x, beta_prev, beta_next, params);
    let radius = search_radius(params, (z / x).abs() + beta_prev.abs() + beta_next.abs());
    let step = 2.0 * radius / (GRID_POINTS - 1) as f64;

    // each half-line separately so no bracket straddles the kink at zero
    let positive = grid_refine_max(&f, ZERO_GAP.min(step), radius);
    let negative = grid_refine_max(&f, -radius, -ZERO_GAP.min(step));
    let best = if positive.1 >= negative.1 { positive } else { negative };

    let zero_value = f(0.0);
    if best.1 - zero_value > TIE_TOLERANCE {
        let polished = polish(best.0, z, x, beta_prev, beta_next, params);
        Ok(if f(polished) >= best.1 { polished } else { best.0 })
    } else {
        Ok(0.0)
    }
}

/// Residual of the first-order condition `β = (Z - Λ*(β) sign β) / x²` at a nonzero `beta`.
/// When `sign β = sign Z` this is `β = [|Z| - Λ*]₊ sign(Z) / x²`.
pub fn fixed_point_residual(
    beta: f64,
    z: f64,
    x: f64,
    beta_prev: f64,
    beta_next: f64,
    params: &DssParams,
) -> Result<f64> {
    let shrink = total_shrinkage(beta, beta_prev, beta_next, params)?.total;
    let big_z = x * z;
    Ok((beta - (big_z - shrink * beta.signum()) / (x * x)).abs())
}
