//! Prospective and retrospective log-prior penalties and their shrinkage terms.
//!
//! `pen(β | β_prev)` is the log of the conditional mixture density of `β` given the previous
//! coefficient. Read as a function of `β_prev` with the next value fixed it becomes the
//! retrospective penalty. Shrinkage terms are negative derivatives with respect to `|β|`, so
//! they are undefined at `β = 0`.

use serde::{Deserialize, Serialize};

use crate::densities::{
    ln_gaussian, ln_laplace, log_add_exp, logistic, slab_mean, theta_log_odds, transition_theta,
    DssParams,
};
use crate::error::{DssError, Result};

/// Split of the total shrinkage `Λ*` into its prospective and retrospective parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageBreakdown {
    pub prospective: f64,
    pub retrospective: f64,
    pub total: f64,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Log-weights of the spike and slab components of the conditional mixture at `beta`.
#[inline]
fn component_logs(beta: f64, beta_prev: f64, params: &DssParams) -> (f64, f64) {
    let log_odds = theta_log_odds(beta_prev, params);
    // log θ and log(1 - θ) straight from the log-odds
    let ln_theta = -log_add_exp(0.0, -log_odds);
    let ln_one_minus = -log_add_exp(0.0, log_odds);
    let mu = slab_mean(beta_prev, params);
    (
        ln_one_minus + ln_laplace(beta, params.lambda0),
        ln_theta + ln_gaussian(beta, mu, params.lambda1),
    )
}

/// `log[(1 - θ_t) ψ0(β) + θ_t ψ1(β | μ_t, λ1)]` with `θ_t`, `μ_t` computed from `beta_prev`.
pub fn prospective_pen(beta: f64, beta_prev: f64, params: &DssParams) -> f64 {
    let (spike, slab) = component_logs(beta, beta_prev, params);
    log_add_exp(spike, slab)
}

/// The same bivariate function viewed in its conditioning argument `beta`.
pub fn retrospective_pen(beta_next: f64, beta: f64, params: &DssParams) -> f64 {
    prospective_pen(beta_next, beta, params)
}

/// `pen(β | β_prev) + pen(β_next | β)` normed to vanish at `β = 0`.
pub fn total_pen(beta: f64, beta_prev: f64, beta_next: f64, params: &DssParams) -> f64 {
    let raw = |b: f64| prospective_pen(b, beta_prev, params) + retrospective_pen(beta_next, b, params);
    raw(beta) - raw(0.0)
}

/// Conditional slab probability `p*_t(β)`: posterior probability that `beta` arose from the
/// conditional slab at time t given `beta_prev`.
pub fn pstar(beta: f64, beta_prev: f64, params: &DssParams) -> f64 {
    let (spike, slab) = component_logs(beta, beta_prev, params);
    logistic(slab - spike)
}

fn require_nonzero(beta: f64) -> Result<()> {
    if beta == 0.0 {
        Err(DssError::ZeroCoefficient)
    } else {
        Ok(())
    }
}

/// `λ*(β | β_prev) = p* (β - μ_t)/λ1 · sign(β) + (1 - p*) λ0`.
pub fn prospective_shrinkage(beta: f64, beta_prev: f64, params: &DssParams) -> Result<f64> {
    require_nonzero(beta)?;
    let p = pstar(beta, beta_prev, params);
    let mu = slab_mean(beta_prev, params);
    Ok(p * (beta - mu) / params.lambda1 * sign(beta) + (1.0 - p) * params.lambda0)
}

/// `∂θ(β)/∂|β| = θ(1 - θ)[λ0 - sign(β)(β - φ0)/A]`.
pub fn theta_abs_derivative(beta: f64, params: &DssParams) -> f64 {
    let theta = transition_theta(beta, params);
    theta * (1.0 - theta) * weight_bracket(beta, params)
}

#[inline]
fn weight_bracket(beta: f64, params: &DssParams) -> f64 {
    params.lambda0 - sign(beta) * (beta - params.phi0) / params.stationary_variance()
}

/// `λ̃*(β | β_next)`, the retrospective shrinkage on `beta` exerted by the next value.
pub fn retrospective_shrinkage(beta: f64, beta_next: f64, params: &DssParams) -> Result<f64> {
    require_nonzero(beta)?;
    let theta_next = transition_theta(beta, params);
    let p_next = pstar(beta_next, beta, params);
    let mu_next = slab_mean(beta, params);
    let first = weight_bracket(beta, params)
        * ((1.0 - p_next) * theta_next - p_next * (1.0 - theta_next));
    let second = p_next * params.phi1 * sign(beta) * (beta_next - mu_next) / params.lambda1;
    Ok(first - second)
}

/// `Λ* = λ* + λ̃*`.
pub fn total_shrinkage(
    beta: f64,
    beta_prev: f64,
    beta_next: f64,
    params: &DssParams,
) -> Result<ShrinkageBreakdown> {
    let prospective = prospective_shrinkage(beta, beta_prev, params)?;
    let retrospective = retrospective_shrinkage(beta, beta_next, params)?;
    Ok(ShrinkageBreakdown {
        prospective,
        retrospective,
        total: prospective + retrospective,
    })
}

/// Interior local maxima of `f` over an ascending grid.
pub fn grid_local_maxima<F: Fn(f64) -> f64>(f: F, grid: &[f64]) -> Vec<f64> {
    let values: Vec<f64> = grid.iter().map(|&b| f(b)).collect();
    (1..grid.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .map(|i| grid[i])
        .collect()
}
