//! Spike and slab densities, the stationary marginals of the dynamic spike-and-slab process,
//! the mixing-weight transition function and a forward sampler.
//!
//! The spike is a Laplace density with rate `lambda0`; the conditional slab is Gaussian with
//! mean `phi0 + phi1 (beta_prev - phi0)` and variance `lambda1`. With `|phi1| < 1` the slab
//! AR(1) process is stationary with variance `A = lambda1 / (1 - phi1^2)`, and the process
//! marginal is the `theta_marginal`-weighted mixture of that Gaussian and the spike.
//!
//! Densities are evaluated in log space; ratios go through [`logistic`] so the mixing weight
//! never divides two underflowed numbers.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};
use crate::rng;

/// Hyperparameters `(Θ, λ0, λ1, φ0, φ1)` of the process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DssParams {
    /// Marginal slab weight Θ, strictly inside (0, 1).
    pub theta_marginal: f64,
    /// Laplace spike rate.
    pub lambda0: f64,
    /// Conditional slab variance.
    pub lambda1: f64,
    /// Stationary slab mean.
    pub phi0: f64,
    /// Slab autoregression coefficient, `|phi1| < 1`.
    pub phi1: f64,
}

impl DssParams {
    pub fn new(theta_marginal: f64, lambda0: f64, lambda1: f64, phi0: f64, phi1: f64) -> Result<Self> {
        let params = Self {
            theta_marginal,
            lambda0,
            lambda1,
            phi0,
            phi1,
        };
        params.validate()?;
        Ok(params)
    }

    /// Parameterisation used in experiment grids: stationary slab variance `A` instead of `λ1`.
    pub fn from_stationary_variance(
        theta_marginal: f64,
        lambda0: f64,
        stationary_variance: f64,
        phi0: f64,
        phi1: f64,
    ) -> Result<Self> {
        Self::new(
            theta_marginal,
            lambda0,
            stationary_variance * (1.0 - phi1 * phi1),
            phi0,
            phi1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.theta_marginal, self.lambda0, self.lambda1, self.phi0, self.phi1]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(DssError::ParameterDomain("parameters must be finite".into()));
        }
        if !(self.theta_marginal > 0.0 && self.theta_marginal < 1.0) {
            return Err(DssError::ParameterDomain(format!(
                "theta_marginal must lie in (0, 1), got {}",
                self.theta_marginal
            )));
        }
        if self.lambda0 <= 0.0 {
            return Err(DssError::ParameterDomain(format!(
                "lambda0 must be positive, got {}",
                self.lambda0
            )));
        }
        if self.lambda1 <= 0.0 {
            return Err(DssError::ParameterDomain(format!(
                "lambda1 must be positive, got {}",
                self.lambda1
            )));
        }
        if self.phi1.abs() >= 1.0 {
            return Err(DssError::ParameterDomain(format!(
                "|phi1| must be below 1 for stationarity, got {}",
                self.phi1
            )));
        }
        Ok(())
    }

    /// Stationary slab variance `A = λ1 / (1 - φ1²)`.
    pub fn stationary_variance(&self) -> f64 {
        self.lambda1 / (1.0 - self.phi1 * self.phi1)
    }
}

/// Numerically stable `1 / (1 + exp(-log_odds))`.
pub fn logistic(log_odds: f64) -> f64 {
    if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub(crate) fn ln_laplace(beta: f64, lambda0: f64) -> f64 {
    (0.5 * lambda0).ln() - lambda0 * beta.abs()
}

#[inline]
pub(crate) fn ln_gaussian(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * variance).ln() - d * d / (2.0 * variance)
}

/// Laplace spike density `λ0/2 · exp(-λ0 |β|)`.
pub fn spike_pdf(beta: f64, lambda0: f64) -> Result<f64> {
    if !(lambda0 > 0.0) {
        return Err(DssError::ParameterDomain(format!(
            "lambda0 must be positive, got {lambda0}"
        )));
    }
    Ok(ln_laplace(beta, lambda0).exp())
}

/// Conditional slab density: Gaussian with mean `mu` and variance `lambda1`.
pub fn slab_cond_pdf(beta: f64, mu: f64, lambda1: f64) -> Result<f64> {
    if !(lambda1 > 0.0) {
        return Err(DssError::ParameterDomain(format!(
            "lambda1 must be positive, got {lambda1}"
        )));
    }
    Ok(ln_gaussian(beta, mu, lambda1).exp())
}

/// Conditional slab mean `φ0 + φ1 (β_prev - φ0)`.
#[inline]
pub fn slab_mean(beta_prev: f64, params: &DssParams) -> f64 {
    params.phi0 + params.phi1 * (beta_prev - params.phi0)
}

pub(crate) fn ln_slab_stationary(beta: f64, params: &DssParams) -> f64 {
    ln_gaussian(beta, params.phi0, params.stationary_variance())
}

/// Stationary slab marginal, Gaussian with mean `φ0` and variance `A`.
pub fn slab_stationary_pdf(beta: f64, params: &DssParams) -> Result<f64> {
    if params.phi1.abs() >= 1.0 {
        return Err(DssError::ParameterDomain(format!(
            "|phi1| must be below 1, got {}",
            params.phi1
        )));
    }
    if !(params.lambda1 > 0.0) {
        return Err(DssError::ParameterDomain("lambda1 must be positive".into()));
    }
    Ok(ln_slab_stationary(beta, params).exp())
}

/// Log of the stationary mixture marginal `Θ ψ1ST(β) + (1 - Θ) ψ0(β)`.
pub fn ln_stationary_mixture(beta: f64, params: &DssParams) -> f64 {
    log_add_exp(
        params.theta_marginal.ln() + ln_slab_stationary(beta, params),
        (1.0 - params.theta_marginal).ln() + ln_laplace(beta, params.lambda0),
    )
}

/// Stationary mixture marginal of the process.
pub fn stationary_mixture_pdf(beta: f64, params: &DssParams) -> Result<f64> {
    params.validate()?;
    Ok(ln_stationary_mixture(beta, params).exp())
}

/// Log-odds of the stationary slab against the spike at `beta_prev`.
#[inline]
pub(crate) fn theta_log_odds(beta_prev: f64, params: &DssParams) -> f64 {
    params.theta_marginal.ln() + ln_slab_stationary(beta_prev, params)
        - (1.0 - params.theta_marginal).ln()
        - ln_laplace(beta_prev, params.lambda0)
}

/// Mixing weight `θ(β_prev)`: posterior probability that `beta_prev` came from the stationary
/// slab rather than the spike.
#[inline]
pub fn transition_theta(beta_prev: f64, params: &DssParams) -> f64 {
    logistic(theta_log_odds(beta_prev, params))
}

/// Location of the maximum of [`transition_theta`] on `beta_prev >= phi0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurningPoint {
    /// Zero of the weight's derivative, `φ0 + λ0 A`.
    pub analytic: f64,
    /// The closed form `(λ0 + sqrt(2C/A)) A` with `C = log[(1-Θ)/Θ · λ0/2 · sqrt(2πA)]`,
    /// kept verbatim for reporting. `None` when `2C/A < 0`. It does not agree with
    /// `analytic` and is never used in computations.
    pub as_printed: Option<f64>,
}

pub fn theta_turning_point(params: &DssParams) -> TurningPoint {
    let a = params.stationary_variance();
    let theta = params.theta_marginal;
    let c = ((1.0 - theta) / theta * params.lambda0 / 2.0 * (2.0 * PI * a).sqrt()).ln();
    let ratio = 2.0 * c / a;
    TurningPoint {
        analytic: params.phi0 + params.lambda0 * a,
        as_printed: (ratio >= 0.0).then(|| (params.lambda0 + ratio.sqrt()) * a),
    }
}

/// A sampled trajectory `β_0..β_T` with regimes `γ_1..γ_T` and weights `θ_1..θ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DssPath {
    pub values: Vec<f64>,
    /// `true` for slab.
    pub regimes: Vec<bool>,
    pub weights: Vec<f64>,
}

impl DssPath {
    pub fn horizon(&self) -> usize {
        self.regimes.len()
    }

    /// CSV with columns `t,beta,gamma,theta`; the `t = 0` row leaves gamma and theta empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["t", "beta", "gamma", "theta"])?;
        w.write_record(["0".to_string(), self.values[0].to_string(), String::new(), String::new()])?;
        for t in 1..self.values.len() {
            w.write_record([
                t.to_string(),
                self.values[t].to_string(),
                u8::from(self.regimes[t - 1]).to_string(),
                self.weights[t - 1].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw from the spike, a Laplace law centred at zero.
pub(crate) fn draw_spike<R: Rng + ?Sized>(rng: &mut R, lambda0: f64) -> f64 {
    let magnitude = Exp::new(lambda0).expect("positive rate").sample(rng);
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Draw from the stationary mixture marginal.
pub fn draw_stationary<R: Rng + ?Sized>(rng: &mut R, params: &DssParams) -> f64 {
    if rng.random::<f64>() < params.theta_marginal {
        Normal::new(params.phi0, params.stationary_variance().sqrt())
            .expect("finite variance")
            .sample(rng)
    } else {
        draw_spike(rng, params.lambda0)
    }
}

/// Forward-simulate the process for `horizon` steps with `β_0` from the stationary marginal.
pub fn sample_dss_path(params: &DssParams, horizon: usize, seed: u64) -> Result<DssPath> {
    params.validate()?;
    if horizon == 0 {
        return Err(DssError::EmptyHorizon);
    }
    let mut rng = rng::stream(seed, 0);
    let slab_sd = params.lambda1.sqrt();
    let mut values = Vec::with_capacity(horizon + 1);
    let mut regimes = Vec::with_capacity(horizon);
    let mut weights = Vec::with_capacity(horizon);
    values.push(draw_stationary(&mut rng, params));
    for t in 1..=horizon {
        let prev = values[t - 1];
        let theta = transition_theta(prev, params);
        let slab = rng.random::<f64>() < theta;
        let next = if slab {
            slab_mean(prev, params) + slab_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        } else {
            draw_spike(&mut rng, params.lambda0)
        };
        regimes.push(slab);
        weights.push(theta);
        values.push(next);
    }
    Ok(DssPath {
        values,
        regimes,
        weights,
    })
}
