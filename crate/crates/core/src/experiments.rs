//! Synthetic designs, recovery metrics, the one-step-ahead forecasting harness, replication
//! grids and panel CSV ingestion.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dlm_fit, lasso_cv, lasso_expanding_path};
use crate::densities::{transition_theta, DssParams};
use crate::em::{fit_map, CoefPath, Dataset, FitOptions};
use crate::error::{DssError, Result};
use crate::rng;

fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

/// Shape of the synthetic coefficient paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDesign {
    /// Series kept away from zero for the whole horizon.
    pub persistent: usize,
    /// Series thresholded to zero whenever they are small.
    pub intermittent: usize,
    pub phi1: f64,
    /// Innovation variance of the coefficient AR(1) processes.
    pub innovation_variance: f64,
    /// Magnitude below which intermittent series are zeroed and persistent paths rejected.
    pub floor: f64,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            persistent: 1,
            intermittent: 3,
            phi1: 0.98,
            innovation_variance: 0.1,
            floor: 0.5,
        }
    }
}

impl SyntheticDesign {
    pub fn signal_series(&self) -> usize {
        self.persistent + self.intermittent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub dataset: Dataset,
    pub true_path: CoefPath,
    /// `p × T`, true where the coefficient is nonzero.
    pub active_mask: DMatrix<bool>,
    /// Whole-path draws used per persistent series before one stayed above the floor.
    pub rejection_draws: Vec<usize>,
}

const MAX_REJECTION_DRAWS: usize = 1_000_000;

fn ar1_path<R: Rng>(rng: &mut R, horizon: usize, phi1: f64, variance: f64) -> Vec<f64> {
    let sd = variance.sqrt();
    let stationary_sd = (variance / (1.0 - phi1 * phi1)).sqrt();
    let mut out = Vec::with_capacity(horizon + 1);
    let z: f64 = rng.sample(StandardNormal);
    out.push(stationary_sd * z);
    for t in 1..=horizon {
        let e: f64 = rng.sample(StandardNormal);
        out.push(phi1 * out[t - 1] + sd * e);
    }
    out
}

/// True coefficient path (including `β_0`) of the synthetic design.
pub fn synthetic_path(
    design: &SyntheticDesign,
    predictors: usize,
    horizon: usize,
    seed: u64,
) -> Result<(CoefPath, Vec<usize>)> {
    let signal = design.signal_series();
    if predictors <= signal {
        return Err(DssError::Configuration(format!(
            "need more than {signal} predictors so that noise series exist, got {predictors}"
        )));
    }
    if horizon < 2 {
        return Err(DssError::Configuration(format!("need T >= 2, got {horizon}")));
    }
    if !(design.phi1.abs() < 1.0 && design.innovation_variance > 0.0 && design.floor >= 0.0) {
        return Err(DssError::Configuration("invalid synthetic design parameters".into()));
    }
    let mut rng = rng::stream(seed, 1);
    let mut path = CoefPath::zeros(predictors, horizon);
    let mut draws = Vec::new();
    for j in 0..design.persistent {
        let mut attempts = 0;
        let series = loop {
            attempts += 1;
            let candidate = ar1_path(&mut rng, horizon, design.phi1, design.innovation_variance);
            if candidate[1..].iter().all(|b| b.abs() > design.floor) {
                break candidate;
            }
            if attempts >= MAX_REJECTION_DRAWS {
                return Err(DssError::Configuration(format!(
                    "no persistent path above {} after {attempts} draws",
                    design.floor
                )));
            }
        };
        draws.push(attempts);
        for (t, b) in series.into_iter().enumerate() {
            path.set(t, j, b);
        }
    }
    for j in design.persistent..signal {
        let series = ar1_path(&mut rng, horizon, design.phi1, design.innovation_variance);
        for (t, b) in series.into_iter().enumerate() {
            path.set(t, j, if b.abs() < design.floor { 0.0 } else { b });
        }
    }
    Ok((path, draws))
}

/// Responses and standard-normal regressors for a fixed coefficient path, unit observation noise.
pub fn simulate_responses(path: &CoefPath, seed: u64) -> Result<Dataset> {
    let (p, horizon) = (path.predictors(), path.horizon());
    let mut rng = rng::stream(seed, 2);
    let design = DMatrix::from_fn(horizon, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let responses = DVector::from_fn(horizon, |r, _| {
        let signal: f64 = (0..p).map(|j| design[(r, j)] * path.at(r + 1, j)).sum();
        signal + noise.sample(&mut rng)
    });
    Dataset::new(responses, design, None)
}

fn mask_of(path: &CoefPath) -> DMatrix<bool> {
    path.coefficients.map(|b| b != 0.0)
}

pub fn simulate_design(
    design: &SyntheticDesign,
    predictors: usize,
    horizon: usize,
    seed: u64,
) -> Result<SyntheticTruth> {
    let (true_path, rejection_draws) = synthetic_path(design, predictors, horizon, seed)?;
    let dataset = simulate_responses(&true_path, seed)?;
    Ok(SyntheticTruth {
        dataset,
        active_mask: mask_of(&true_path),
        true_path,
        rejection_draws,
    })
}

/// The default design: one persistent, three intermittent and `p - 4` zero series.
pub fn simulate_synthetic(predictors: usize, horizon: usize, seed: u64) -> Result<SyntheticTruth> {
    simulate_design(&SyntheticDesign::default(), predictors, horizon, seed)
}

impl SyntheticTruth {
    /// Mask CSV: one row per `t = 1..T`, 1 for active coefficients.
    pub fn write_mask_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.dataset.labels());
        w.write_record(&header)?;
        for t in 0..self.active_mask.ncols() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.active_mask.column(t).iter().map(|&a| u8::from(a).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_shapes(estimate: &CoefPath, truth: &CoefPath, columns: &Range<usize>) -> Result<()> {
    if estimate.predictors() != truth.predictors() || estimate.horizon() != truth.horizon() {
        return Err(DssError::Dimension(format!(
            "estimate is {}×{} but truth is {}×{}",
            estimate.predictors(),
            estimate.horizon(),
            truth.predictors(),
            truth.horizon()
        )));
    }
    if columns.end > truth.predictors() {
        return Err(DssError::Dimension(format!(
            "series range {columns:?} exceeds {} predictors",
            truth.predictors()
        )));
    }
    Ok(())
}

/// Sum of squared errors over `t = 1..T` and the series in `columns`.
pub fn sse(estimate: &CoefPath, truth: &CoefPath, columns: Range<usize>) -> Result<f64> {
    check_shapes(estimate, truth, &columns)?;
    let mut total = 0.0;
    for j in columns {
        for t in 0..truth.horizon() {
            let d = estimate.coefficients[(j, t)] - truth.coefficients[(j, t)];
            total += d * d;
        }
    }
    Ok(total)
}

/// Percentage of entries in `columns` whose zero/nonzero status differs from the truth.
pub fn hamming(estimate: &CoefPath, truth: &CoefPath, columns: Range<usize>) -> Result<f64> {
    check_shapes(estimate, truth, &columns)?;
    let cells = columns.len() * truth.horizon();
    if cells == 0 {
        return Err(DssError::EmptyInput("empty series range".into()));
    }
    let mut mismatches = 0usize;
    for j in columns {
        for t in 0..truth.horizon() {
            let a = estimate.coefficients[(j, t)] == 0.0;
            let b = truth.coefficients[(j, t)] == 0.0;
            mismatches += usize::from(a != b);
        }
    }
    Ok(100.0 * mismatches as f64 / cells as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sse_total: f64,
    pub sse_signal: f64,
    pub sse_noise: f64,
    pub hamming_total: f64,
    pub hamming_signal: f64,
    pub hamming_noise: f64,
    pub runtime_seconds: f64,
}

impl MetricsReport {
    /// Metrics with the first `signal` series counted as signal and the rest as noise.
    pub fn compute(estimate: &CoefPath, truth: &CoefPath, signal: usize, runtime_seconds: f64) -> Result<Self> {
        let p = truth.predictors();
        if signal == 0 || signal >= p {
            return Err(DssError::Configuration(format!("signal count {signal} must lie in 1..{p}")));
        }
        Ok(Self {
            sse_total: sse(estimate, truth, 0..p)?,
            sse_signal: sse(estimate, truth, 0..signal)?,
            sse_noise: sse(estimate, truth, signal..p)?,
            hamming_total: hamming(estimate, truth, 0..p)?,
            hamming_signal: hamming(estimate, truth, 0..signal)?,
            hamming_noise: hamming(estimate, truth, signal..p)?,
            runtime_seconds,
        })
    }

    fn accumulate(&mut self, other: &Self) {
        self.sse_total += other.sse_total;
        self.sse_signal += other.sse_signal;
        self.sse_noise += other.sse_noise;
        self.hamming_total += other.hamming_total;
        self.hamming_signal += other.hamming_signal;
        self.hamming_noise += other.hamming_noise;
        self.runtime_seconds += other.runtime_seconds;
    }

    fn scaled(mut self, factor: f64) -> Self {
        self.sse_total *= factor;
        self.sse_signal *= factor;
        self.sse_noise *= factor;
        self.hamming_total *= factor;
        self.hamming_signal *= factor;
        self.hamming_noise *= factor;
        self.runtime_seconds *= factor;
        self
    }
}

/// How a fitted state at time `t` is propagated to a forecast of `y_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastRule {
    /// `Σ_j x_j θ(β_tj) φ1 β_tj`, the one-step conditional mean of the process.
    #[default]
    ProcessMean,
    /// `x' β_t`.
    PlugIn,
}

/// One-step-ahead forecast from the last state of `path`.
pub fn forecast_one_step(
    path: &CoefPath,
    x_next: &DVector<f64>,
    params: &DssParams,
    rule: ForecastRule,
) -> Result<f64> {
    if x_next.len() != path.predictors() {
        return Err(DssError::Dimension(format!(
            "{} regressors for {} coefficients",
            x_next.len(),
            path.predictors()
        )));
    }
    let last = path.horizon();
    Ok((0..path.predictors())
        .map(|j| {
            let b = path.at(last, j);
            let mean = match rule {
                ForecastRule::ProcessMean => transition_theta(b, params) * params.phi1 * b,
                ForecastRule::PlugIn => b,
            };
            x_next[j] * mean
        })
        .sum())
}

/// Running mean of squared errors.
pub fn msfe_path(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(DssError::EmptyInput("no forecast errors".into()));
    }
    let mut acc = 0.0;
    Ok(errors
        .iter()
        .enumerate()
        .map(|(k, e)| {
            acc += e * e;
            acc / (k + 1) as f64
        })
        .collect())
}

/// A method usable in the forecasting harness.
pub trait ForecastMethod: Sync {
    fn name(&self) -> String;

    /// Fit on `train` and forecast the next response from `x_next`. `warm` is this method's
    /// state from the previous origin; the returned state is handed to the next origin.
    fn forecast(
        &self,
        train: &Dataset,
        x_next: &DVector<f64>,
        warm: Option<&CoefPath>,
    ) -> Result<(f64, Option<CoefPath>)>;
}

/// Extend a path by repeating its last state until it covers `horizon` steps.
pub fn extend_path(path: &CoefPath, horizon: usize) -> CoefPath {
    let p = path.predictors();
    let mut out = CoefPath::zeros(p, horizon);
    out.beta0 = path.beta0.clone();
    for t in 1..=horizon {
        let source = t.min(path.horizon());
        for j in 0..p {
            out.set(t, j, path.at(source, j));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DssForecaster {
    pub params: DssParams,
    pub options: FitOptions,
    pub rule: ForecastRule,
    pub warm_start: bool,
}

impl ForecastMethod for DssForecaster {
    fn name(&self) -> String {
        "dss".into()
    }

    fn forecast(
        &self,
        train: &Dataset,
        x_next: &DVector<f64>,
        warm: Option<&CoefPath>,
    ) -> Result<(f64, Option<CoefPath>)> {
        let mut options = self.options.clone();
        if self.warm_start {
            options.warm_start = warm.map(|w| extend_path(w, train.horizon()));
        }
        let fit = fit_map(train, &self.params, &options)?;
        let yhat = forecast_one_step(&fit.path, x_next, &self.params, self.rule)?;
        Ok((yhat, Some(fit.path)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DlmForecaster {
    pub phi1: f64,
    pub lambda1: f64,
}

impl ForecastMethod for DlmForecaster {
    fn name(&self) -> String {
        "dlm".into()
    }

    fn forecast(&self, train: &Dataset, x_next: &DVector<f64>, _: Option<&CoefPath>) -> Result<(f64, Option<CoefPath>)> {
        let path = dlm_fit(train, self.phi1, self.lambda1)?;
        let last = path.state(path.horizon());
        Ok((self.phi1 * x_next.dot(&last), None))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LassoForecaster {
    pub folds: usize,
    pub seed: u64,
}

impl ForecastMethod for LassoForecaster {
    fn name(&self) -> String {
        "lasso".into()
    }

    fn forecast(&self, train: &Dataset, x_next: &DVector<f64>, _: Option<&CoefPath>) -> Result<(f64, Option<CoefPath>)> {
        let seed = rng::child_seed(self.seed, train.horizon() as u64);
        let fit = lasso_cv(train.responses(), train.design(), self.folds, seed)?;
        Ok((x_next.dot(&DVector::from_column_slice(&fit.coefficients)), None))
    }
}

/// Forecast record of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodForecast {
    pub method: String,
    /// Target time index of each forecast (1-based).
    pub targets: Vec<usize>,
    /// Forecast error per target, `None` where the fit failed.
    pub errors: Vec<Option<f64>>,
    /// Running MSFE over the successful forecasts so far.
    pub msfe: Vec<Option<f64>>,
    pub final_msfe: Option<f64>,
    pub failures: Vec<String>,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub split: usize,
    pub methods: Vec<MethodForecast>,
}

impl ForecastReport {
    pub fn partial(&self) -> bool {
        self.methods.iter().any(|m| !m.failures.is_empty())
    }

    pub fn get(&self, name: &str) -> Option<&MethodForecast> {
        self.methods.iter().find(|m| m.method == name)
    }
}

impl MethodForecast {
    /// CSV with columns `t,error,msfe`; failed targets leave both cells empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv_writer(writer);
        w.write_record(["t", "error", "msfe"])?;
        for ((t, e), m) in self.targets.iter().zip(&self.errors).zip(&self.msfe) {
            let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([t.to_string(), cell(e), cell(m)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_one_method(data: &Dataset, split: usize, method: &dyn ForecastMethod) -> MethodForecast {
    let start = Instant::now();
    let mut warm: Option<CoefPath> = None;
    let mut targets = Vec::new();
    let mut errors = Vec::new();
    let mut msfe = Vec::new();
    let mut failures = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for t in split..data.horizon() {
        targets.push(t + 1);
        let outcome = data.truncated(t).and_then(|train| {
            let x_next = data.design().row(t).transpose();
            method.forecast(&train, &x_next, warm.as_ref())
        });
        match outcome {
            Ok((yhat, state)) => {
                let e = data.responses()[t] - yhat;
                sum += e * e;
                count += 1;
                errors.push(Some(e));
                if state.is_some() {
                    warm = state;
                }
            }
            Err(err) => {
                failures.push(format!("t = {}: {err}", t + 1));
                errors.push(None);
            }
        }
        msfe.push((count > 0).then(|| sum / count as f64));
    }
    MethodForecast {
        method: method.name(),
        final_msfe: msfe.last().copied().flatten(),
        targets,
        errors,
        msfe,
        failures,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Train on rows `1..t` and forecast row `t + 1`, for `t = split..T-1`. Each method only ever sees
/// the truncated dataset. Methods run in parallel; a failing origin is recorded and skipped.
pub fn run_forecast_experiment(
    data: &Dataset,
    split: usize,
    methods: &[&dyn ForecastMethod],
) -> Result<ForecastReport> {
    if split < 2 || split >= data.horizon() {
        return Err(DssError::Configuration(format!(
            "split must lie in [2, {}), got {split}",
            data.horizon()
        )));
    }
    let methods = methods
        .par_iter()
        .map(|m| run_one_method(data, split, *m))
        .collect();
    Ok(ForecastReport { split, methods })
}

/// A method cell of the replication grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    Dss { params: DssParams },
    Dlm { phi1: f64, lambda1: f64 },
    Lasso { folds: usize },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Dss { params } => format!(
                "DSS {{{}, {}, {}, {}}}",
                params.phi1,
                params.lambda0,
                round_label(params.stationary_variance()),
                params.theta_marginal
            ),
            MethodSpec::Dlm { .. } => "DLM".into(),
            MethodSpec::Lasso { .. } => "LASSO".into(),
        }
    }

    /// Fit on `data`, returning the path and the wall time.
    pub fn fit(&self, data: &Dataset, options: &FitOptions, seed: u64) -> Result<(CoefPath, f64)> {
        let start = Instant::now();
        let path = match self {
            MethodSpec::Dss { params } => fit_map(data, params, options)?.path,
            MethodSpec::Dlm { phi1, lambda1 } => dlm_fit(data, *phi1, *lambda1)?,
            MethodSpec::Lasso { folds } => lasso_expanding_path(data, *folds, seed)?,
        };
        Ok((path, start.elapsed().as_secs_f64()))
    }
}

fn round_label(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// The 24 DSS cells `{φ1, λ0, λ1/(1-φ1²), Θ}` of the synthetic study, in table order.
pub fn study_grid() -> Vec<DssParams> {
    let mut cells = Vec::new();
    for &phi1 in &[0.95, 0.98] {
        for &ratio in &[10.0, 25.0] {
            for &lambda0 in &[0.7, 0.9] {
                for &theta in &[0.9, 0.95, 0.98] {
                    cells.push(
                        DssParams::from_stationary_variance(theta, lambda0, ratio, 0.0, phi1)
                            .expect("grid values are valid"),
                    );
                }
            }
        }
    }
    cells
}

/// Default DLM comparator: true `φ1 = 0.98` with `λ1 = 25(1 - φ1²)`.
pub fn default_dlm() -> MethodSpec {
    MethodSpec::Dlm {
        phi1: 0.98,
        lambda1: 25.0 * (1.0 - 0.98 * 0.98),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub predictors: usize,
    pub horizon: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub design: SyntheticDesign,
    pub cells: Vec<MethodSpec>,
    pub fit_options: FitOptions,
}

impl ReplicationConfig {
    /// The full synthetic study: 24 DSS cells, DLM and LASSO on `p = 50`, `T = 100`, 10 runs.
    pub fn synthetic_study(master_seed: u64) -> Self {
        let mut cells: Vec<MethodSpec> = vec![default_dlm(), MethodSpec::Lasso { folds: 10 }];
        cells.extend(study_grid().into_iter().map(|params| MethodSpec::Dss { params }));
        Self {
            predictors: 50,
            horizon: 100,
            replications: 10,
            master_seed,
            design: SyntheticDesign::default(),
            cells,
            fit_options: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub spec: MethodSpec,
    /// Mean over successful replications.
    pub mean: MetricsReport,
    pub successes: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub cells: Vec<CellSummary>,
    /// Per-cell, per-replication metrics in config order (`None` for failures).
    pub runs: Vec<Vec<Option<MetricsReport>>>,
}

impl ReplicationReport {
    pub fn partial(&self) -> bool {
        self.cells.iter().any(|c| !c.failures.is_empty())
    }

    /// Summary CSV: method, hyperparameters, time, then SSE and Hamming for all/signal/noise.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv_writer(writer);
        w.write_record([
            "method",
            "phi1",
            "lambda0",
            "stationary_variance",
            "theta",
            "time_s",
            "sse_total",
            "hamming_total",
            "sse_signal",
            "hamming_signal",
            "sse_noise",
            "hamming_noise",
            "successes",
            "failures",
        ])?;
        for cell in &self.cells {
            let (phi1, lambda0, ratio, theta) = match cell.spec {
                MethodSpec::Dss { params } => (
                    params.phi1.to_string(),
                    params.lambda0.to_string(),
                    round_label(params.stationary_variance()).to_string(),
                    params.theta_marginal.to_string(),
                ),
                MethodSpec::Dlm { phi1, lambda1 } => (
                    phi1.to_string(),
                    String::new(),
                    round_label(lambda1 / (1.0 - phi1 * phi1)).to_string(),
                    String::new(),
                ),
                MethodSpec::Lasso { .. } => Default::default(),
            };
            let m = &cell.mean;
            let name = match cell.spec {
                MethodSpec::Dss { .. } => "DSS",
                MethodSpec::Dlm { .. } => "DLM",
                MethodSpec::Lasso { .. } => "LASSO",
            };
            w.write_record([
                name.to_string(),
                phi1,
                lambda0,
                ratio,
                theta,
                m.runtime_seconds.to_string(),
                m.sse_total.to_string(),
                m.hamming_total.to_string(),
                m.sse_signal.to_string(),
                m.hamming_signal.to_string(),
                m.sse_noise.to_string(),
                m.hamming_noise.to_string(),
                cell.successes.to_string(),
                cell.failures.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replicated synthetic study. The coefficient path is drawn once from `master_seed`; each
/// replication draws fresh regressors and noise from its own child seed. Cells and replications
/// run in parallel and are aggregated in config order.
pub fn run_replications(config: &ReplicationConfig) -> Result<ReplicationReport> {
    if config.replications == 0 || config.cells.is_empty() {
        return Err(DssError::Configuration("need at least one replication and one cell".into()));
    }
    let (truth, _) = synthetic_path(&config.design, config.predictors, config.horizon, config.master_seed)?;
    let datasets: Vec<Dataset> = (0..config.replications)
        .map(|r| simulate_responses(&truth, rng::child_seed(config.master_seed, r as u64)))
        .collect::<Result<_>>()?;
    let signal = config.design.signal_series();

    let jobs: Vec<(usize, usize)> = (0..config.cells.len())
        .flat_map(|c| (0..config.replications).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<std::result::Result<MetricsReport, String>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let seed = rng::child_seed(config.master_seed ^ 0x5EED, r as u64);
            config.cells[c]
                .fit(&datasets[r], &config.fit_options, seed)
                .and_then(|(path, secs)| MetricsReport::compute(&path, &truth, signal, secs))
                .map_err(|e| format!("replication {r}: {e}"))
        })
        .collect();

    let mut cells = Vec::with_capacity(config.cells.len());
    let mut runs = Vec::with_capacity(config.cells.len());
    for (c, spec) in config.cells.iter().enumerate() {
        let slice = &outcomes[c * config.replications..(c + 1) * config.replications];
        let mut total = MetricsReport::default();
        let mut successes = 0;
        let mut failures = Vec::new();
        let mut cell_runs = Vec::with_capacity(slice.len());
        for outcome in slice {
            match outcome {
                Ok(m) => {
                    total.accumulate(m);
                    successes += 1;
                    cell_runs.push(Some(*m));
                }
                Err(e) => {
                    failures.push(e.clone());
                    cell_runs.push(None);
                }
            }
        }
        let mean = if successes > 0 {
            total.scaled(1.0 / successes as f64)
        } else {
            MetricsReport::default()
        };
        cells.push(CellSummary {
            label: spec.label(),
            spec: *spec,
            mean,
            successes,
            failures,
        });
        runs.push(cell_runs);
    }
    Ok(ReplicationReport { cells, runs })
}

/// Per-column affine map applied by [`load_panel_csv`]; the response is column 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    fn fit(columns: &[Vec<f64>]) -> Self {
        let mut means = Vec::with_capacity(columns.len());
        let mut scales = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = if col.len() > 1 {
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            means.push(mean);
            // constant columns are only centred
            scales.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { means, scales }
    }

    pub fn apply(&self, column: usize, value: f64) -> f64 {
        (value - self.means[column]) / self.scales[column]
    }

    pub fn invert(&self, column: usize, value: f64) -> f64 {
        value * self.scales[column] + self.means[column]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelOptions {
    /// Header name of the response column.
    pub target: String,
    /// Whether the first column is a date or row identifier to be ignored.
    pub date_column: bool,
    pub standardize: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            target: "y".into(),
            date_column: true,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub dataset: Dataset,
    /// Identifier column, when present.
    pub dates: Option<Vec<String>>,
    pub transform: Option<Standardization>,
}

/// Parse a rectangular panel: a header row, an optional identifier column, numeric cells.
/// Error locations are 1-based file lines (the header is line 1) and 1-based columns.
pub fn read_panel_csv<R: std::io::Read>(reader: R, options: &PanelOptions) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(DssError::EmptyInput("panel file has no header".into())),
    };
    let width = header.len();
    let first = usize::from(options.date_column);
    let names: Vec<String> = header.iter().skip(first).map(|s| s.trim().to_string()).collect();
    let target = names.iter().position(|n| *n == options.target).ok_or_else(|| DssError::Parse {
        row: 1,
        column: 0,
        message: format!("target column '{}' not found", options.target),
    })?;
    if names.len() < 2 {
        return Err(DssError::EmptyInput("panel needs a target and at least one predictor".into()));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut dates = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != width {
            return Err(DssError::Parse {
                row: line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        if options.date_column {
            dates.push(record[0].to_string());
        }
        for (k, cell) in record.iter().skip(first).enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| DssError::Parse {
                row: line,
                column: k + first + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DssError::Parse {
                    row: line,
                    column: k + first + 1,
                    message: "non-finite value".into(),
                });
            }
            columns[k].push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(DssError::EmptyInput("panel has no data rows".into()));
    }
    // response first, then predictors in file order
    let mut order = vec![target];
    order.extend((0..names.len()).filter(|&k| k != target));
    let mut ordered: Vec<Vec<f64>> = order.iter().map(|&k| columns[k].clone()).collect();
    let transform = options.standardize.then(|| Standardization::fit(&ordered));
    if let Some(tr) = &transform {
        for (c, col) in ordered.iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = tr.apply(c, *v);
            }
        }
    }
    let rows = ordered[0].len();
    let responses = DVector::from_vec(ordered[0].clone());
    let design = DMatrix::from_fn(rows, order.len() - 1, |r, c| ordered[c + 1][r]);
    let predictor_names = order[1..].iter().map(|&k| names[k].clone()).collect();
    Ok(Panel {
        dataset: Dataset::new(responses, design, Some(predictor_names))?,
        dates: options.date_column.then_some(dates),
        transform,
    })
}

pub fn load_panel_csv(path: &Path, options: &PanelOptions) -> Result<Panel> {
    let file = std::fs::File::open(path).map_err(|e| {
        DssError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_panel_csv(std::io::BufReader::new(file), options)
}

/// Write a dataset as `t,y,<predictors>` with `t = 1..T`.
pub fn write_panel_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv_writer(writer);
    let mut header = vec!["t".to_string(), "y".to_string()];
    header.extend(data.labels());
    w.write_record(&header)?;
    for r in 0..data.horizon() {
        let mut row = vec![(r + 1).to_string(), data.responses()[r].to_string()];
        row.extend((0..data.predictors()).map(|j| data.design()[(r, j)].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn synthetic_mask_structure() {
        let truth = simulate_synthetic(12, 60, 3).unwrap();
        for j in 4..12 {
            assert!(truth.active_mask.row(j).iter().all(|a| !a));
        }
        assert!(truth.active_mask.row(0).iter().all(|a| *a));
        assert!(truth.true_path.coefficients.row(0).iter().all(|b| b.abs() > 0.5));
        assert_eq!(truth.rejection_draws.len(), 1);
        for j in 1..4 {
            for t in 0..60 {
                let b = truth.true_path.coefficients[(j, t)];
                assert!(b == 0.0 || b.abs() >= 0.5);
            }
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = simulate_synthetic(8, 30, 9).unwrap();
        assert_eq!(a, simulate_synthetic(8, 30, 9).unwrap());
        assert_ne!(a.dataset, simulate_synthetic(8, 30, 10).unwrap().dataset);
    }

    #[test]
    fn synthetic_rejects_small_designs() {
        assert!(matches!(simulate_synthetic(3, 50, 1), Err(DssError::Configuration(_))));
        assert!(simulate_synthetic(4, 50, 1).is_err());
        assert!(simulate_synthetic(6, 1, 1).is_err());
    }

    #[test]
    fn responses_follow_the_model() {
        let design = SyntheticDesign {
            floor: 0.0,
            ..SyntheticDesign::default()
        };
        let truth = simulate_design(&design, 6, 2000, 5).unwrap();
        let d = &truth.dataset;
        let resid: Vec<f64> = (0..d.horizon())
            .map(|r| d.responses()[r] - (0..6).map(|j| d.design()[(r, j)] * truth.true_path.coefficients[(j, r)]).sum::<f64>())
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / resid.len() as f64;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1, "{mean} {var}");
    }

    fn small_paths() -> (CoefPath, CoefPath) {
        let truth = CoefPath::new(DVector::zeros(3), DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).unwrap();
        let estimate = CoefPath::new(DVector::zeros(3), DMatrix::from_row_slice(3, 2, &[1.5, 0.1, 0.0, 0.0, 0.0, 2.0])).unwrap();
        (estimate, truth)
    }

    #[test]
    fn sse_examples() {
        let (estimate, truth) = small_paths();
        assert_eq!(sse(&truth, &truth, 0..3).unwrap(), 0.0);
        let zero = CoefPath::zeros(3, 2);
        let mut single = CoefPath::zeros(3, 2);
        single.set(2, 1, 2.0);
        assert_eq!(sse(&single, &zero, 0..3).unwrap(), 4.0);
        let whole = sse(&estimate, &truth, 0..3).unwrap();
        let parts = sse(&estimate, &truth, 0..1).unwrap() + sse(&estimate, &truth, 1..3).unwrap();
        assert_abs_diff_eq!(whole, parts, epsilon = 1e-12);
        assert!(sse(&CoefPath::zeros(2, 2), &truth, 0..2).is_err());
    }

    #[test]
    fn hamming_examples() {
        let (estimate, truth) = small_paths();
        assert_eq!(hamming(&truth, &truth, 0..3).unwrap(), 0.0);
        let dense = CoefPath::new(DVector::zeros(3), DMatrix::from_element(3, 2, 0.3)).unwrap();
        assert_eq!(hamming(&dense, &CoefPath::zeros(3, 2), 0..3).unwrap(), 100.0);
        assert_eq!(hamming(&CoefPath::zeros(3, 2), &dense, 1..3).unwrap(), 100.0);
        // mismatches at (0,1), (1,1), (2,1)
        assert_abs_diff_eq!(hamming(&estimate, &truth, 0..3).unwrap(), 50.0, epsilon = 1e-12);
        let report = MetricsReport::compute(&estimate, &truth, 1, 0.0).unwrap();
        assert_abs_diff_eq!(report.sse_total, report.sse_signal + report.sse_noise, epsilon = 1e-12);
    }

    #[test]
    fn forecast_rules() {
        let p = DssParams::new(0.9, 1.0, 1.0, 0.0, 0.98).unwrap();
        let zero = CoefPath::zeros(3, 4);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(forecast_one_step(&zero, &x, &p, ForecastRule::ProcessMean).unwrap(), 0.0);
        let mut path = CoefPath::zeros(3, 4);
        path.set(4, 0, 1.0);
        let theta = transition_theta(1.0, &p);
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(
            forecast_one_step(&path, &x, &p, ForecastRule::ProcessMean).unwrap(),
            theta * 0.98,
            epsilon = 1e-15
        );
        assert_eq!(forecast_one_step(&path, &x, &p, ForecastRule::PlugIn).unwrap(), 1.0);
        assert!(forecast_one_step(&path, &DVector::zeros(2), &p, ForecastRule::PlugIn).is_err());
    }

    #[test]
    fn msfe_examples() {
        assert_eq!(msfe_path(&[2.0, -2.0, 2.0]).unwrap(), vec![4.0, 4.0, 4.0]);
        assert_eq!(msfe_path(&[1.0, 0.0]).unwrap(), vec![1.0, 0.5]);
        let a = msfe_path(&[1.0, 3.0, -2.0]).unwrap();
        let b = msfe_path(&[-2.0, 1.0, 3.0]).unwrap();
        assert_ne!(a, b);
        assert_abs_diff_eq!(a[2], b[2], epsilon = 1e-15);
        assert!(msfe_path(&[]).is_err());
    }

    #[test]
    fn table_grid_has_24_cells() {
        let grid = study_grid();
        assert_eq!(grid.len(), 24);
        let first = grid[0];
        assert_eq!((first.phi1, first.lambda0, first.theta_marginal), (0.95, 0.7, 0.9));
        assert_abs_diff_eq!(first.stationary_variance(), 10.0, epsilon = 1e-12);
        let bold = grid[15];
        assert_eq!((bold.phi1, bold.lambda0, bold.theta_marginal), (0.98, 0.9, 0.9));
        assert_abs_diff_eq!(bold.stationary_variance(), 10.0, epsilon = 1e-12);
        assert_eq!(ReplicationConfig::synthetic_study(1).cells.len(), 26);
    }

    #[test]
    fn extend_path_repeats_last_state() {
        let path = CoefPath::new(DVector::from_vec(vec![0.5]), DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        let longer = extend_path(&path, 4);
        assert_eq!(longer.coefficients.as_slice(), &[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(longer.beta0[0], 0.5);
    }

    #[test]
    fn panel_round_trip() {
        let data = Dataset::new(
            DVector::from_vec(vec![1.0, 2.5, -3.0]),
            DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            Some(vec!["a".into(), "b".into()]),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&data, &mut buf).unwrap();
        let panel = read_panel_csv(buf.as_slice(), &PanelOptions::default()).unwrap();
        assert_eq!(panel.dataset, data);
        assert_eq!(panel.dates.unwrap(), vec!["1", "2", "3"]);
    }

    #[test]
    fn panel_errors_name_the_cell() {
        let mut text = String::from("date,y,x\n");
        for i in 0..8 {
            if i == 5 {
                text.push_str("d5,abc,1.0\n");
            } else {
                text.push_str(&format!("d{i},{i}.0,1.0\n"));
            }
        }
        match read_panel_csv(text.as_bytes(), &PanelOptions::default()) {
            Err(DssError::Parse { row, column, .. }) => assert_eq!((row, column), (7, 2)),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let ragged = "date,y,x\nd1,1.0,2.0\nd2,1.0\n";
        assert!(matches!(
            read_panel_csv(ragged.as_bytes(), &PanelOptions::default()),
            Err(DssError::Parse { row: 3, .. })
        ));
        let missing = PanelOptions {
            target: "z".into(),
            ..PanelOptions::default()
        };
        assert!(read_panel_csv("date,y,x\nd1,1,2\n".as_bytes(), &missing).is_err());
    }

    #[test]
    fn standardization_inverts() {
        let text = "date,x,y\nd1,1.0,10.0\nd2,2.0,20.5\nd3,4.0,31.0\nd4,-1.0,-7.25\n";
        let opts = PanelOptions {
            standardize: true,
            ..PanelOptions::default()
        };
        let panel = read_panel_csv(text.as_bytes(), &opts).unwrap();
        let tr = panel.transform.unwrap();
        let y = panel.dataset.responses();
        let raw_y = [10.0, 20.5, 31.0, -7.25];
        let raw_x = [1.0, 2.0, 4.0, -1.0];
        assert_abs_diff_eq!(y.mean(), 0.0, epsilon = 1e-12);
        for r in 0..4 {
            assert_abs_diff_eq!(tr.invert(0, y[r]), raw_y[r], epsilon = 1e-12);
            assert_abs_diff_eq!(tr.invert(1, panel.dataset.design()[(r, 0)]), raw_x[r], epsilon = 1e-12);
        }
        assert_eq!(panel.dataset.column_names().unwrap(), &["x".to_string()]);
    }
}
