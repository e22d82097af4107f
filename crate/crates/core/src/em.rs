//! One-step-late EM smoother for the MAP coefficient path.
//!
//! The E-step replaces the regime indicators by their conditional slab probabilities `p*`.
//! The M-step cycles closed-form coordinate updates. The dependence of the next transition
//! weight `θ_{t+1}` on the current coefficient is frozen at the previous iterate, which turns each
//! update into an elastic-net style thresholding rule.
//!
//! Time indices run `t = 0..=T`, with `t = 0` the initial state drawn from the stationary law.
//! Data row `t - 1` holds observation `t`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::densities::{ln_stationary_mixture, transition_theta, DssParams};
use crate::error::{DssError, Result};
use crate::penalty::{prospective_pen, pstar};
use crate::threshold::one_site_map;

fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

/// Responses `y_1..y_T` with a `T × p` design.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    responses: DVector<f64>,
    design: DMatrix<f64>,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        responses: DVector<f64>,
        design: DMatrix<f64>,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if responses.is_empty() {
            return Err(DssError::EmptyHorizon);
        }
        if design.nrows() != responses.len() {
            return Err(DssError::Dimension(format!(
                "design has {} rows but there are {} responses",
                design.nrows(),
                responses.len()
            )));
        }
        if design.ncols() == 0 {
            return Err(DssError::Dimension("design has no columns".into()));
        }
        if let Some(names) = &column_names {
            if names.len() != design.ncols() {
                return Err(DssError::Dimension(format!(
                    "{} column names for {} predictors",
                    names.len(),
                    design.ncols()
                )));
            }
        }
        if !responses.iter().chain(design.iter()).all(|v| v.is_finite()) {
            return Err(DssError::Dimension("dataset contains non-finite values".into()));
        }
        Ok(Self {
            responses,
            design,
            column_names,
        })
    }

    pub fn horizon(&self) -> usize {
        self.responses.len()
    }

    pub fn predictors(&self) -> usize {
        self.design.ncols()
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Column labels, falling back to `x1..xp`.
    pub fn labels(&self) -> Vec<String> {
        match &self.column_names {
            Some(names) => names.clone(),
            None => (1..=self.predictors()).map(|j| format!("x{j}")).collect(),
        }
    }

    /// The first `rows` observations.
    pub fn truncated(&self, rows: usize) -> Result<Self> {
        if rows == 0 || rows > self.horizon() {
            return Err(DssError::Dimension(format!(
                "cannot keep {rows} of {} rows",
                self.horizon()
            )));
        }
        Ok(Self {
            responses: self.responses.rows(0, rows).into_owned(),
            design: self.design.rows(0, rows).into_owned(),
            column_names: self.column_names.clone(),
        })
    }
}

/// Coefficient path: initial state `β_0` and the `p × T` matrix of `β_1..β_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefPath {
    pub beta0: DVector<f64>,
    pub coefficients: DMatrix<f64>,
}

impl CoefPath {
    pub fn zeros(predictors: usize, horizon: usize) -> Self {
        Self {
            beta0: DVector::zeros(predictors),
            coefficients: DMatrix::zeros(predictors, horizon),
        }
    }

    pub fn new(beta0: DVector<f64>, coefficients: DMatrix<f64>) -> Result<Self> {
        if beta0.len() != coefficients.nrows() {
            return Err(DssError::Dimension(format!(
                "beta0 has length {} but the path has {} rows",
                beta0.len(),
                coefficients.nrows()
            )));
        }
        if !beta0.iter().chain(coefficients.iter()).all(|v| v.is_finite()) {
            return Err(DssError::Dimension("coefficient path contains non-finite values".into()));
        }
        Ok(Self { beta0, coefficients })
    }

    pub fn predictors(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.coefficients.ncols()
    }

    /// `β_tj` for `t` in `0..=T`.
    pub fn at(&self, t: usize, j: usize) -> f64 {
        if t == 0 {
            self.beta0[j]
        } else {
            self.coefficients[(j, t - 1)]
        }
    }

    pub fn set(&mut self, t: usize, j: usize, value: f64) {
        if t == 0 {
            self.beta0[j] = value;
        } else {
            self.coefficients[(j, t - 1)] = value;
        }
    }

    /// `β_t` as a vector, `t` in `0..=T`.
    pub fn state(&self, t: usize) -> DVector<f64> {
        if t == 0 {
            self.beta0.clone()
        } else {
            self.coefficients.column(t - 1).into_owned()
        }
    }

    fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.predictors() != data.predictors() || self.horizon() != data.horizon() {
            return Err(DssError::Dimension(format!(
                "path is {}×{} but the data are {}×{}",
                self.predictors(),
                self.horizon(),
                data.predictors(),
                data.horizon()
            )));
        }
        Ok(())
    }

    /// CSV with one row per `t = 0..=T` and one column per predictor.
    pub fn write_csv<W: Write>(&self, writer: W, labels: &[String]) -> Result<()> {
        if labels.len() != self.predictors() {
            return Err(DssError::Dimension("one label per predictor required".into()));
        }
        let mut w = csv_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for t in 0..=self.horizon() {
            let mut row = vec![t.to_string()];
            row.extend((0..self.predictors()).map(|j| self.at(t, j).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// E-step output. Column `t` of `theta` is `θ_t = θ(β_{t-1})` for `t >= 1` and `Θ` at `t = 0`.
/// Column `t` of `pstar` is `p*_t` for `t >= 1` and `p*_0 = θ(β_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub theta: DMatrix<f64>,
    pub pstar: DMatrix<f64>,
}

impl WeightState {
    fn all_slab(predictors: usize, horizon: usize) -> Self {
        Self {
            theta: DMatrix::from_element(predictors, horizon + 1, 1.0),
            pstar: DMatrix::from_element(predictors, horizon + 1, 1.0),
        }
    }

    /// Transition weights `θ_1..θ_T`, one row per `t`.
    pub fn write_theta_csv<W: Write>(&self, writer: W, labels: &[String]) -> Result<()> {
        if labels.len() != self.theta.nrows() {
            return Err(DssError::Dimension("one label per predictor required".into()));
        }
        let mut w = csv_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for t in 1..self.theta.ncols() {
            let mut row = vec![t.to_string()];
            row.extend(self.theta.column(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Conditional slab probabilities and transition weights under the current path.
pub fn estep(path: &CoefPath, data: &Dataset, params: &DssParams) -> Result<WeightState> {
    path.check_against(data)?;
    let (p, horizon) = (path.predictors(), path.horizon());
    let mut theta = DMatrix::zeros(p, horizon + 1);
    let mut pstars = DMatrix::zeros(p, horizon + 1);
    for j in 0..p {
        theta[(j, 0)] = params.theta_marginal;
        pstars[(j, 0)] = transition_theta(path.at(0, j), params);
        for t in 1..=horizon {
            let prev = path.at(t - 1, j);
            theta[(j, t)] = transition_theta(prev, params);
            pstars[(j, t)] = pstar(path.at(t, j), prev, params);
        }
    }
    Ok(WeightState {
        theta,
        pstar: pstars,
    })
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

/// Frozen inputs of one coordinate update at `1 <= t <= T`. For `t = T` the next-time fields are
/// absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteState {
    pub t: usize,
    pub j: usize,
    pub x: f64,
    /// Partial residual `y_t - Σ_{i≠j} x_ti β_ti`.
    pub z: f64,
    pub beta_prev: f64,
    pub pstar: f64,
    pub next: Option<NextSite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NextSite {
    pub beta: f64,
    pub pstar: f64,
    pub theta: f64,
}

/// Pieces of the closed-form update: `β = [|Z| - Λ]₊ sign(Z) / (W + c M)` with `c = (1-φ1²)/λ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateTerms {
    pub z: f64,
    pub w: f64,
    pub m: f64,
    pub shrinkage: f64,
    pub denominator: f64,
}

impl SiteState {
    pub fn terms(&self, params: &DssParams) -> UpdateTerms {
        let (phi1, lambda1) = (params.phi1, params.lambda1);
        let mut z = self.x * self.z + self.pstar * phi1 / lambda1 * self.beta_prev;
        let mut w = self.x * self.x + self.pstar / lambda1;
        let mut m = 0.0;
        if let Some(next) = self.next {
            z += next.pstar * phi1 / lambda1 * next.beta;
            w += next.pstar * phi1 * phi1 / lambda1;
            m = next.pstar * (1.0 - next.theta) - next.theta * (1.0 - next.pstar);
        }
        let shrinkage = params.lambda0 * ((1.0 - self.pstar) - m);
        let denominator = w + (1.0 - phi1 * phi1) / lambda1 * m;
        UpdateTerms {
            z,
            w,
            m,
            shrinkage,
            denominator,
        }
    }

    /// The frozen-weight derivative `Z - (W + cM) β - Λ sign β` at a nonzero `beta`.
    pub fn frozen_derivative(&self, beta: f64, params: &DssParams) -> f64 {
        let terms = self.terms(params);
        terms.z - terms.denominator * beta - terms.shrinkage * sign(beta)
    }

    /// Objective whose derivative is [`Self::frozen_derivative`]: the expected complete-data
    /// log posterior in this coordinate, with the next weight's dependence on `beta` linearised
    /// at the previous iterate.
    pub fn frozen_objective(&self, beta: f64, params: &DssParams) -> f64 {
        let (phi1, lambda1, lambda0) = (params.phi1, params.lambda1, params.lambda0);
        let r = self.z - self.x * beta;
        let mut value = -0.5 * r * r
            - self.pstar * (beta - phi1 * self.beta_prev).powi(2) / (2.0 * lambda1)
            - (1.0 - self.pstar) * lambda0 * beta.abs();
        if let Some(next) = self.next {
            let m = next.pstar * (1.0 - next.theta) - next.theta * (1.0 - next.pstar);
            let c = (1.0 - phi1 * phi1) / lambda1;
            value += -next.pstar * (next.beta - phi1 * beta).powi(2) / (2.0 * lambda1)
                + m * (lambda0 * beta.abs() - 0.5 * c * beta * beta);
        }
        value
    }
}

fn threshold_update(terms: &UpdateTerms, t: usize, j: usize) -> Result<f64> {
    if !(terms.denominator > 0.0) {
        return Err(DssError::NonpositiveDenominator {
            t,
            j,
            denominator: terms.denominator,
        });
    }
    let excess = terms.z.abs() - terms.shrinkage;
    if excess <= 0.0 {
        Ok(0.0)
    } else {
        Ok(excess * sign(terms.z) / terms.denominator)
    }
}

/// Closed-form update at `1 <= t < T`.
pub fn mstep_interior(site: &SiteState, params: &DssParams) -> Result<f64> {
    if site.next.is_none() {
        return Err(DssError::Dimension("interior update needs the next-time state".into()));
    }
    threshold_update(&site.terms(params), site.t, site.j)
}

/// Closed-form update at `t = T`; any next-time state in `site` is ignored.
pub fn mstep_terminal(site: &SiteState, params: &DssParams) -> Result<f64> {
    let terminal = SiteState { next: None, ..*site };
    threshold_update(&terminal.terms(params), site.t, site.j)
}

/// Which form of the initial-state update to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialUpdate {
    /// Exact maximiser of the `t = 0` terms:
    /// `sign(u)[|u| - (1-p*_0)λ0λ1]₊ / (p*_1 φ1² + p*_0 (1-φ1²))` with `u = p*_1 φ1 β_1`.
    #[default]
    FirstOrder,
    /// `[p*_0 φ1 β_1 - (1-p*_0)λ0λ1]₊ sign(β_1) / (p*_1 φ1² + p*_0 (1-φ1²))`, kept for comparison.
    /// Differs from the maximiser when `p*_0 ≠ p*_1` and always returns 0 for `β_1 < 0`.
    AsPrinted,
}

/// Frozen inputs of the initial-state update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialSite {
    pub j: usize,
    pub beta1: f64,
    pub pstar0: f64,
    pub pstar1: f64,
}

/// Result of the initial-state update; `degenerate` is set when both weights vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialOutcome {
    pub beta0: f64,
    pub degenerate: bool,
}

impl InitialSite {
    /// The `t = 0` terms of the expected complete-data log posterior.
    pub fn objective(&self, beta0: f64, params: &DssParams) -> f64 {
        let (phi1, lambda1) = (params.phi1, params.lambda1);
        -self.pstar0 * beta0 * beta0 * (1.0 - phi1 * phi1) / (2.0 * lambda1)
            - (1.0 - self.pstar0) * params.lambda0 * beta0.abs()
            - self.pstar1 * (self.beta1 - phi1 * beta0).powi(2) / (2.0 * lambda1)
    }
}

pub fn mstep_initial(site: &InitialSite, params: &DssParams, form: InitialUpdate) -> InitialOutcome {
    let (phi1, lambda1, lambda0) = (params.phi1, params.lambda1, params.lambda0);
    let denominator = site.pstar1 * phi1 * phi1 + site.pstar0 * (1.0 - phi1 * phi1);
    if !(denominator > 0.0) {
        return InitialOutcome {
            beta0: 0.0,
            degenerate: true,
        };
    }
    let penalty = (1.0 - site.pstar0) * lambda0 * lambda1;
    let beta0 = match form {
        InitialUpdate::FirstOrder => {
            let u = site.pstar1 * phi1 * site.beta1;
            let excess = u.abs() - penalty;
            if excess <= 0.0 {
                0.0
            } else {
                sign(u) * excess / denominator
            }
        }
        InitialUpdate::AsPrinted => {
            let bracket = site.pstar0 * site.beta1 * phi1 - penalty;
            if bracket <= 0.0 {
                0.0
            } else {
                bracket * sign(site.beta1) / denominator
            }
        }
    };
    InitialOutcome {
        beta0,
        degenerate: false,
    }
}

/// Log posterior of a path with the regimes marginalised out.
pub fn log_posterior(path: &CoefPath, data: &Dataset, params: &DssParams) -> Result<f64> {
    path.check_against(data)?;
    let mut likelihood = 0.0;
    for t in 1..=data.horizon() {
        let row = data.design().row(t - 1);
        let fit: f64 = (0..data.predictors()).map(|j| row[j] * path.at(t, j)).sum();
        let r = data.responses()[t - 1] - fit;
        likelihood -= 0.5 * r * r;
    }
    let mut prior = 0.0;
    for j in 0..path.predictors() {
        prior += ln_stationary_mixture(path.at(0, j), params);
        for t in 1..=path.horizon() {
            prior += prospective_pen(path.at(t, j), path.at(t - 1, j), params);
        }
    }
    Ok(likelihood + prior)
}

/// Replacement for the E-step, used for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepMode {
    #[default]
    Dss,
    /// Every `p*` and `θ` pinned to 1: the Gaussian state-space smoother.
    AllSlab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub sweeps_per_mstep: usize,
    pub estep: EStepMode,
    pub initial_update: InitialUpdate,
    /// Full residual recomputation period, in sweeps.
    pub residual_refresh: usize,
    #[serde(skip)]
    pub warm_start: Option<CoefPath>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            sweeps_per_mstep: 1,
            estep: EStepMode::Dss,
            initial_update: InitialUpdate::FirstOrder,
            residual_refresh: 50,
            warm_start: None,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.sweeps_per_mstep == 0 || self.residual_refresh == 0 {
            return Err(DssError::Configuration(
                "max_iters, sweeps_per_mstep and residual_refresh must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(DssError::Configuration(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub path: CoefPath,
    /// E-step weights recomputed at the returned path.
    pub weights: WeightState,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest coordinate change in the final iteration.
    pub last_change: f64,
    /// Initial-state updates that hit a zero denominator in the final iteration.
    pub degenerate_initial: usize,
    pub hyperparams: DssParams,
}

/// JSON-friendly summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub params: DssParams,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
    pub degenerate_initial: usize,
    pub final_objective: f64,
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    pub fn metadata(&self) -> FitMetadata {
        FitMetadata {
            params: self.hyperparams,
            iterations: self.iterations,
            converged: self.converged,
            last_change: self.last_change,
            degenerate_initial: self.degenerate_initial,
            final_objective: self.objective_trace.last().copied().unwrap_or(f64::NAN),
            objective_trace: self.objective_trace.clone(),
        }
    }

    pub fn write_metadata_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.metadata())?;
        Ok(())
    }
}

fn require_centered(params: &DssParams) -> Result<()> {
    if params.phi0 != 0.0 {
        return Err(DssError::Configuration(format!(
            "the EM smoother assumes phi0 = 0 (got {}); center the coefficient process externally",
            params.phi0
        )));
    }
    Ok(())
}

/// Working copy of the path, one contiguous `β_0..β_T` row per predictor.
struct Working {
    horizon: usize,
    beta: Vec<f64>,
}

impl Working {
    fn from_path(path: &CoefPath) -> Self {
        let horizon = path.horizon();
        let mut beta = Vec::with_capacity(path.predictors() * (horizon + 1));
        for j in 0..path.predictors() {
            beta.extend((0..=horizon).map(|t| path.at(t, j)));
        }
        Self { horizon, beta }
    }

    #[inline]
    fn get(&self, t: usize, j: usize) -> f64 {
        self.beta[j * (self.horizon + 1) + t]
    }

    #[inline]
    fn put(&mut self, t: usize, j: usize, v: f64) {
        self.beta[j * (self.horizon + 1) + t] = v;
    }

    fn to_path(&self, predictors: usize) -> CoefPath {
        let mut path = CoefPath::zeros(predictors, self.horizon);
        for j in 0..predictors {
            for t in 0..=self.horizon {
                path.set(t, j, self.get(t, j));
            }
        }
        path
    }

    fn residuals(&self, data: &Dataset) -> Vec<f64> {
        (1..=self.horizon)
            .map(|t| {
                let fit: f64 = (0..data.predictors())
                    .map(|j| data.design()[(t - 1, j)] * self.get(t, j))
                    .sum();
                data.responses()[t - 1] - fit
            })
            .collect()
    }

    fn first_non_finite(&self, predictors: usize) -> (usize, usize) {
        for j in 0..predictors {
            for t in 0..=self.horizon {
                if !self.get(t, j).is_finite() {
                    return (t, j);
                }
            }
        }
        (0, 0)
    }
}

/// MAP path by one-step-late EM, started from zero (or `options.warm_start`).
pub fn fit_map(data: &Dataset, params: &DssParams, options: &FitOptions) -> Result<FitResult> {
    params.validate()?;
    require_centered(params)?;
    options.validate()?;
    let (p, horizon) = (data.predictors(), data.horizon());
    let start = match &options.warm_start {
        Some(path) => {
            path.check_against(data)?;
            path.clone()
        }
        None => CoefPath::zeros(p, horizon),
    };
    let mut work = Working::from_path(&start);
    let mut residual = work.residuals(data);
    let design = data.design();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    let mut degenerate_initial = 0;
    let mut sweeps = 0usize;
    let mut iterations = 0;

    for iteration in 1..=options.max_iters {
        iterations = iteration;
        let weights = match options.estep {
            EStepMode::Dss => estep(&work.to_path(p), data, params)?,
            EStepMode::AllSlab => WeightState::all_slab(p, horizon),
        };
        let mut max_change: f64 = 0.0;
        degenerate_initial = 0;
        for _ in 0..options.sweeps_per_mstep {
            for j in 0..p {
                // initial state
                let outcome = mstep_initial(
                    &InitialSite {
                        j,
                        beta1: work.get(1, j),
                        pstar0: weights.pstar[(j, 0)],
                        pstar1: weights.pstar[(j, 1)],
                    },
                    params,
                    options.initial_update,
                );
                degenerate_initial += usize::from(outcome.degenerate);
                max_change = max_change.max((outcome.beta0 - work.get(0, j)).abs());
                work.put(0, j, outcome.beta0);

                for t in 1..=horizon {
                    let x = design[(t - 1, j)];
                    let old = work.get(t, j);
                    let next = (t < horizon).then(|| NextSite {
                        beta: work.get(t + 1, j),
                        pstar: weights.pstar[(j, t + 1)],
                        theta: weights.theta[(j, t + 1)],
                    });
                    let site = SiteState {
                        t,
                        j,
                        x,
                        z: residual[t - 1] + x * old,
                        beta_prev: work.get(t - 1, j),
                        pstar: weights.pstar[(j, t)],
                        next,
                    };
                    let new = if next.is_some() {
                        mstep_interior(&site, params)?
                    } else {
                        mstep_terminal(&site, params)?
                    };
                    if !new.is_finite() {
                        return Err(DssError::Divergence { iteration, t, j });
                    }
                    if new != old {
                        residual[t - 1] -= x * (new - old);
                        max_change = max_change.max((new - old).abs());
                        work.put(t, j, new);
                    }
                }
            }
            sweeps += 1;
            if sweeps.is_multiple_of(options.residual_refresh) {
                residual = work.residuals(data);
            }
        }
        let objective = log_posterior(&work.to_path(p), data, params)?;
        if !objective.is_finite() {
            let (t, j) = work.first_non_finite(p);
            return Err(DssError::Divergence { iteration, t, j });
        }
        trace.push(objective);
        last_change = max_change;
        if max_change < options.tol {
            converged = true;
            break;
        }
    }

    let path = work.to_path(p);
    let weights = estep(&path, data, params)?;
    Ok(FitResult {
        path,
        weights,
        objective_trace: trace,
        iterations,
        converged,
        last_change,
        degenerate_initial,
        hyperparams: *params,
    })
}

/// Agreement between a fitted path and the exact one-site maximiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub checked: usize,
    pub max_discrepancy: f64,
    /// Fraction of coordinates where fit and oracle agree on being zero or nonzero.
    pub zero_agreement: f64,
    /// Fraction of coordinates with identical sign (zero counted as its own sign).
    pub sign_agreement: f64,
}

/// Compare interior coordinates `(t, j)` of a fit with the one-site maximiser on the same
/// partial residual. Coordinates outside `1..T` or with `x_tj = 0` are skipped.
pub fn coordinate_consistency_check(
    fit: &FitResult,
    data: &Dataset,
    params: &DssParams,
    sample: &[(usize, usize)],
) -> Result<ConsistencyReport> {
    let path = &fit.path;
    path.check_against(data)?;
    let horizon = path.horizon();
    let mut checked = 0;
    let mut max_discrepancy: f64 = 0.0;
    let mut zero_hits = 0;
    let mut sign_hits = 0;
    for &(t, j) in sample {
        if t == 0 || t >= horizon || j >= path.predictors() {
            continue;
        }
        let x = data.design()[(t - 1, j)];
        if x == 0.0 {
            continue;
        }
        let others: f64 = (0..path.predictors())
            .filter(|&i| i != j)
            .map(|i| data.design()[(t - 1, i)] * path.at(t, i))
            .sum();
        let z = data.responses()[t - 1] - others;
        let oracle = one_site_map(z, x, path.at(t - 1, j), path.at(t + 1, j), params)?;
        let fitted = path.at(t, j);
        checked += 1;
        max_discrepancy = max_discrepancy.max((oracle - fitted).abs());
        zero_hits += usize::from((oracle == 0.0) == (fitted == 0.0));
        sign_hits += usize::from(sign(oracle) == sign(fitted));
    }
    let frac = |hits: usize| if checked == 0 { 1.0 } else { hits as f64 / checked as f64 };
    Ok(ConsistencyReport {
        checked,
        max_discrepancy,
        zero_agreement: frac(zero_hits),
        sign_agreement: frac(sign_hits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reference_prior() -> DssParams {
        DssParams::from_stationary_variance(0.9, 1.0, 10.0, 0.0, 0.9).unwrap()
    }

    fn slab_params() -> DssParams {
        DssParams::new(0.5, 0.9, 1.0, 0.0, 0.9).unwrap()
    }

    /// Root of a central-difference derivative of `f` on `[lo, hi]` by bisection.
    fn fd_root<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
        let h = 1e-5;
        let d = |b: f64| (f(b + h) - f(b - h)) / (2.0 * h);
        assert!(d(lo) > 0.0 && d(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn tiny_data(y: &[f64], x: &[f64]) -> Dataset {
        Dataset::new(
            DVector::from_column_slice(y),
            DMatrix::from_column_slice(y.len(), x.len() / y.len(), x),
            None,
        )
        .unwrap()
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        assert!(Dataset::new(DVector::zeros(3), DMatrix::zeros(2, 1), None).is_err());
        assert!(Dataset::new(DVector::zeros(0), DMatrix::zeros(0, 1), None).is_err());
        assert!(Dataset::new(DVector::from_element(2, f64::NAN), DMatrix::zeros(2, 1), None).is_err());
        assert!(Dataset::new(DVector::zeros(2), DMatrix::zeros(2, 2), Some(vec!["a".into()])).is_err());
        let d = tiny_data(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        assert_eq!(d.truncated(2).unwrap().horizon(), 2);
        assert!(d.truncated(4).is_err());
    }

    #[test]
    fn estep_zero_path_is_homogeneous() {
        let p = reference_prior();
        let data = Dataset::new(DVector::zeros(5), DMatrix::zeros(5, 3), None).unwrap();
        let w = estep(&CoefPath::zeros(3, 5), &data, &p).unwrap();
        let expected = pstar(0.0, 0.0, &p);
        for j in 0..3 {
            for t in 1..=5 {
                assert_eq!(w.pstar[(j, t)], expected);
                assert_eq!(w.theta[(j, t)], transition_theta(0.0, &p));
            }
            assert_eq!(w.theta[(j, 0)], p.theta_marginal);
        }
    }

    #[test]
    fn estep_without_spike_is_all_slab() {
        let p = DssParams::new(1.0 - 1e-12, 1.0, 1.0, 0.0, 0.9).unwrap();
        let data = Dataset::new(DVector::zeros(4), DMatrix::zeros(4, 2), None).unwrap();
        let mut path = CoefPath::zeros(2, 4);
        path.set(2, 1, 0.7);
        path.set(3, 0, -1.2);
        let w = estep(&path, &data, &p).unwrap();
        assert!(w.pstar.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn estep_matches_componentwise_calls() {
        let p = reference_prior();
        let data = tiny_data(&[0.3, -0.4], &[1.0, 0.5]);
        let path = CoefPath::new(DVector::from_vec(vec![0.8]), DMatrix::from_row_slice(1, 2, &[1.1, -0.2])).unwrap();
        let w = estep(&path, &data, &p).unwrap();
        assert_eq!(w.pstar[(0, 0)], transition_theta(0.8, &p));
        assert_eq!(w.pstar[(0, 1)], pstar(1.1, 0.8, &p));
        assert_eq!(w.pstar[(0, 2)], pstar(-0.2, 1.1, &p));
        assert_eq!(w.theta[(0, 1)], transition_theta(0.8, &p));
        assert_eq!(w.theta[(0, 2)], transition_theta(1.1, &p));
        let bad = CoefPath::zeros(2, 2);
        assert!(estep(&bad, &data, &p).is_err());
    }

    fn slab_site() -> SiteState {
        SiteState {
            t: 3,
            j: 0,
            x: 1.0,
            z: 1.0,
            beta_prev: 1.0,
            pstar: 1.0,
            next: Some(NextSite {
                beta: 1.0,
                pstar: 1.0,
                theta: 1.0,
            }),
        }
    }

    #[test]
    fn interior_pure_slab() {
        let p = slab_params();
        let site = slab_site();
        let terms = site.terms(&p);
        assert_abs_diff_eq!(terms.z, 2.8, epsilon = 1e-15);
        assert_abs_diff_eq!(terms.w, 2.81, epsilon = 1e-15);
        assert_eq!(terms.m, 0.0);
        assert_eq!(terms.shrinkage, 0.0);
        let b = mstep_interior(&site, &p).unwrap();
        assert_abs_diff_eq!(b, 2.8 / 2.81, epsilon = 1e-15);
        let oracle = fd_root(|v| site.frozen_objective(v, &p), 0.1, 3.0);
        assert_abs_diff_eq!(b, oracle, epsilon = 1e-8);
    }

    #[test]
    fn interior_pure_spike_soft_thresholds() {
        let p = slab_params();
        let mut site = SiteState {
            t: 2,
            j: 1,
            x: 1.0,
            z: 0.5,
            beta_prev: 0.4,
            pstar: 0.0,
            next: Some(NextSite {
                beta: -0.3,
                pstar: 0.0,
                theta: 0.0,
            }),
        };
        assert_eq!(mstep_interior(&site, &p).unwrap(), 0.0);
        site.z = 2.0;
        assert_abs_diff_eq!(mstep_interior(&site, &p).unwrap(), 1.1, epsilon = 1e-15);
        site.z = -2.0;
        assert_abs_diff_eq!(mstep_interior(&site, &p).unwrap(), -1.1, epsilon = 1e-15);
    }

    #[test]
    fn interior_requires_next_state() {
        let site = SiteState { next: None, ..slab_site() };
        assert!(mstep_interior(&site, &slab_params()).is_err());
    }

    #[test]
    fn nonpositive_denominator_is_reported() {
        // tiny regressor, spike-dominated next step with M = -1 and a large c
        let p = DssParams::new(0.5, 1.0, 0.01, 0.0, 0.1).unwrap();
        let site = SiteState {
            t: 4,
            j: 2,
            x: 0.01,
            z: 100.0,
            beta_prev: 0.0,
            pstar: 0.0,
            next: Some(NextSite {
                beta: 0.0,
                pstar: 0.0,
                theta: 1.0,
            }),
        };
        match mstep_interior(&site, &p) {
            Err(DssError::NonpositiveDenominator { t, j, denominator }) => {
                assert_eq!((t, j), (4, 2));
                assert!(denominator <= 0.0);
            }
            other => panic!("expected degenerate denominator, got {other:?}"),
        }
    }

    #[test]
    fn terminal_examples() {
        let p = slab_params();
        let site = SiteState { next: None, ..slab_site() };
        assert_abs_diff_eq!(mstep_terminal(&site, &p).unwrap(), 0.95, epsilon = 1e-15);
        let oracle = fd_root(|v| site.frozen_objective(v, &p), 0.1, 3.0);
        assert_abs_diff_eq!(0.95, oracle, epsilon = 1e-8);
        let spike = SiteState {
            pstar: 0.0,
            z: 0.8,
            ..site
        };
        assert_eq!(mstep_terminal(&spike, &p).unwrap(), 0.0);
    }

    #[test]
    fn terminal_is_interior_with_empty_future() {
        let p = reference_prior();
        for &(z, prev, ps) in &[(1.3, 0.4, 0.7), (-2.0, 1.0, 0.2), (0.1, -0.5, 0.95)] {
            let terminal = SiteState {
                t: 5,
                j: 0,
                x: 0.8,
                z,
                beta_prev: prev,
                pstar: ps,
                next: None,
            };
            let interior = SiteState {
                next: Some(NextSite {
                    beta: 3.0,
                    pstar: 0.0,
                    theta: 0.0,
                }),
                ..terminal
            };
            assert_eq!(
                mstep_terminal(&terminal, &p).unwrap(),
                mstep_interior(&interior, &p).unwrap()
            );
        }
    }

    #[test]
    fn initial_update_examples() {
        let p = slab_params();
        for form in [InitialUpdate::FirstOrder, InitialUpdate::AsPrinted] {
            let zero = InitialSite {
                j: 0,
                beta1: 0.0,
                pstar0: 0.6,
                pstar1: 0.7,
            };
            assert_eq!(mstep_initial(&zero, &p, form).beta0, 0.0);
            let slab = InitialSite {
                j: 0,
                beta1: 1.0,
                pstar0: 1.0,
                pstar1: 1.0,
            };
            assert_abs_diff_eq!(mstep_initial(&slab, &p, form).beta0, 0.9, epsilon = 1e-15);
        }
        let spiky = InitialSite {
            j: 0,
            beta1: 5.0,
            pstar0: 0.0,
            pstar1: 0.8,
        };
        assert_eq!(mstep_initial(&spiky, &p, InitialUpdate::AsPrinted).beta0, 0.0);
        let degenerate = InitialSite {
            j: 0,
            beta1: 2.0,
            pstar0: 0.0,
            pstar1: 0.0,
        };
        let out = mstep_initial(&degenerate, &p, InitialUpdate::FirstOrder);
        assert!(out.degenerate);
        assert_eq!(out.beta0, 0.0);
    }

    #[test]
    fn first_order_initial_update_maximises_initial_terms() {
        let p = reference_prior();
        for &(beta1, p0, p1) in &[(2.0, 0.3, 0.9), (-2.5, 0.8, 0.6), (4.0, 0.05, 0.99)] {
            let site = InitialSite {
                j: 0,
                beta1,
                pstar0: p0,
                pstar1: p1,
            };
            let b = mstep_initial(&site, &p, InitialUpdate::FirstOrder).beta0;
            assert!(b != 0.0);
            let (lo, hi) = if b > 0.0 { (1e-6, 20.0) } else { (-20.0, -1e-6) };
            let oracle = fd_root(|v| site.objective(v, &p), lo, hi);
            assert_abs_diff_eq!(b, oracle, epsilon = 1e-8);
            assert!(site.objective(b, &p) >= site.objective(0.0, &p));
        }
    }

    #[test]
    fn printed_initial_update_loses_negative_states() {
        let p = reference_prior();
        let site = InitialSite {
            j: 0,
            beta1: -2.5,
            pstar0: 0.8,
            pstar1: 0.6,
        };
        let printed = mstep_initial(&site, &p, InitialUpdate::AsPrinted).beta0;
        let exact = mstep_initial(&site, &p, InitialUpdate::FirstOrder).beta0;
        assert_eq!(printed, 0.0);
        assert!(site.objective(exact, &p) > site.objective(printed, &p));
    }

    #[test]
    fn log_posterior_composes_terms() {
        let p = reference_prior();
        let data = tiny_data(&[0.0], &[0.0]);
        let lp = log_posterior(&CoefPath::zeros(1, 1), &data, &p).unwrap();
        assert_abs_diff_eq!(
            lp,
            ln_stationary_mixture(0.0, &p) + prospective_pen(0.0, 0.0, &p),
            epsilon = 1e-15
        );
        // design-free likelihood
        let data = tiny_data(&[1.0, -2.0], &[0.0, 0.0]);
        let path = CoefPath::new(DVector::from_vec(vec![0.3]), DMatrix::from_row_slice(1, 2, &[0.5, 0.9])).unwrap();
        let prior = ln_stationary_mixture(0.3, &p) + prospective_pen(0.5, 0.3, &p) + prospective_pen(0.9, 0.5, &p);
        assert_abs_diff_eq!(log_posterior(&path, &data, &p).unwrap(), -2.5 + prior, epsilon = 1e-12);
    }

    #[test]
    fn fit_rejects_nonzero_centre() {
        let p = DssParams::new(0.9, 1.0, 1.0, 0.5, 0.9).unwrap();
        let data = tiny_data(&[1.0, 2.0], &[1.0, 1.0]);
        assert!(matches!(
            fit_map(&data, &p, &FitOptions::default()),
            Err(DssError::Configuration(_))
        ));
        let bad = FitOptions {
            tol: 0.0,
            ..FitOptions::default()
        };
        assert!(fit_map(&data, &reference_prior(), &bad).is_err());
    }

    #[test]
    fn path_csv_layout() {
        let path = CoefPath::new(DVector::from_vec(vec![0.5, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.5])).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf, &["a".into(), "b".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,a,b\n0,0.5,0\n1,1,0\n2,2,-1.5\n");
    }

    fn site_strategy() -> impl Strategy<Value = SiteState> {
        (
            0.2f64..2.0,
            -4.0f64..4.0,
            -3.0f64..3.0,
            0.0f64..=1.0,
            -3.0f64..3.0,
            0.0f64..=1.0,
            0.0f64..=1.0,
        )
            .prop_map(|(x, z, prev, ps, next_beta, next_ps, next_theta)| SiteState {
                t: 1,
                j: 0,
                x,
                z,
                beta_prev: prev,
                pstar: ps,
                next: Some(NextSite {
                    beta: next_beta,
                    pstar: next_ps,
                    theta: next_theta,
                }),
            })
    }

    proptest! {
        #[test]
        fn nonzero_updates_zero_the_frozen_derivative(site in site_strategy()) {
            let p = reference_prior();
            let b = mstep_interior(&site, &p).unwrap();
            if b != 0.0 {
                prop_assert!(site.frozen_derivative(b, &p).abs() < 1e-8);
            } else {
                let terms = site.terms(&p);
                prop_assert!(terms.z.abs() <= terms.shrinkage);
            }
        }
    }
}
