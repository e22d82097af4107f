//! Flag and config-file resolution.
//!
//! Every subcommand has one struct that doubles as its clap arguments and its config-file
//! schema. Flags win over the file; anything still unset gets the subcommand default. The fully
//! resolved struct is written into the run's manifest, and `--config manifest.json` replays it.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dss_core::em::{FitOptions, InitialUpdate};
use dss_core::experiments::ForecastRule;
use dss_core::{DssError, DssParams, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Fill every `None` field of `$dst` from `$src`.
macro_rules! fill {
    ($dst:expr, $src:expr; $($field:ident),+ $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )+
    };
}

/// Read a config file: TOML, or the `config` object of a JSON manifest from an earlier run.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DssError::Configuration(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| DssError::Configuration(format!("{}: {e}", path.display())))?;
        let config = value
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| DssError::Configuration(format!("{} has no `config` entry", path.display())))?;
        serde_json::from_value(config).map_err(|e| DssError::Configuration(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| DssError::Configuration(format!("{}: {e}", path.display())))
    }
}

fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| DssError::Configuration(format!("missing required setting `{name}`")))
}

/// Prior hyperparameters. `ratio` is the stationary slab variance `λ1/(1-φ1²)`, an alternative
/// to giving `lambda1` directly.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamArgs {
    /// Marginal slab probability.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Laplace spike rate.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Conditional slab variance (conflicts with --ratio).
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Stationary slab variance lambda1/(1-phi1^2).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Slab autoregression coefficient.
    #[arg(long)]
    pub phi1: Option<f64>,
}

impl ParamArgs {
    fn merge(&mut self, other: ParamArgs) {
        fill!(self, other; theta, lambda0, phi1);
        // a slab variance given on the command line replaces the file's in either form
        if self.lambda1.is_none() && self.ratio.is_none() {
            self.lambda1 = other.lambda1;
            self.ratio = other.ratio;
        }
    }

    /// Fill defaults `(Θ, λ0, λ1/(1-φ1²), φ1)` and settle `lambda1`.
    fn resolve(&mut self, defaults: (f64, f64, f64, f64)) -> Result<()> {
        let (theta, lambda0, ratio, phi1) = defaults;
        self.theta.get_or_insert(theta);
        self.lambda0.get_or_insert(lambda0);
        let phi1 = *self.phi1.get_or_insert(phi1);
        match (self.lambda1, self.ratio) {
            // a replayed manifest carries both; accept them when they agree
            (Some(l1), Some(r)) => {
                if (l1 - r * (1.0 - phi1 * phi1)).abs() > 1e-9 * l1.abs().max(1e-300) {
                    return Err(DssError::Configuration(
                        "lambda1 and ratio disagree; give only one of them".into(),
                    ));
                }
            }
            (Some(l1), None) => self.ratio = Some(l1 / (1.0 - phi1 * phi1)),
            (None, r) => {
                let r = r.unwrap_or(ratio);
                self.ratio = Some(r);
                self.lambda1 = Some(r * (1.0 - phi1 * phi1));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<DssParams> {
        DssParams::new(
            required(&self.theta, "theta")?,
            required(&self.lambda0, "lambda0")?,
            required(&self.lambda1, "lambda1")?,
            0.0,
            required(&self.phi1, "phi1")?,
        )
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Number of predictors (at least 5).
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of time steps.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.take() {
            let file: SimulateArgs = read_config(&path)?;
            fill!(self, file; p, horizon, seed, out);
        }
        self.p.get_or_insert(50);
        self.horizon.get_or_insert(100);
        self.seed.get_or_insert(1);
        required(&self.out, "out")?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dss,
    Dlm,
    Lasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialForm {
    FirstOrder,
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ProcessMean,
    PlugIn,
}

impl From<Rule> for ForecastRule {
    fn from(rule: Rule) -> Self {
        match rule {
            Rule::ProcessMean => ForecastRule::ProcessMean,
            Rule::PlugIn => ForecastRule::PlugIn,
        }
    }
}

/// How a panel CSV is read.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelArgs {
    /// Response column name.
    #[arg(long)]
    pub target: Option<String>,
    /// The first column holds numeric data rather than a date or row identifier.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_date_column: Option<bool>,
    /// Standardize every column to mean 0, sd 1 before fitting.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,
}

impl PanelArgs {
    fn merge(&mut self, other: PanelArgs) {
        fill!(self, other; target, no_date_column, standardize);
    }

    fn resolve(&mut self) {
        self.target.get_or_insert_with(|| "y".into());
        self.no_date_column.get_or_insert(false);
        self.standardize.get_or_insert(false);
    }

    pub fn options(&self) -> dss_core::experiments::PanelOptions {
        dss_core::experiments::PanelOptions {
            target: self.target.clone().unwrap_or_else(|| "y".into()),
            date_column: !self.no_date_column.unwrap_or(false),
            standardize: self.standardize.unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    /// Panel CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub initial_update: Option<InitialForm>,
    /// Cross-validation folds (lasso).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold-assignment seed (lasso).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Default prior of the fitting commands: `{φ1, λ0, λ1/(1-φ1²), Θ} = {0.98, 0.9, 25, 0.98}`.
const FIT_DEFAULTS: (f64, f64, f64, f64) = (0.98, 0.9, 25.0, 0.98);

/// A single fit can afford more EM iterations than the library default used inside grids.
const FIT_MAX_ITERS: usize = 5000;

impl FitArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.take() {
            let file: FitArgs = read_config(&path)?;
            fill!(self, file; data, method, out, max_iters, tol, initial_update, folds, seed);
            self.params.merge(file.params);
            self.panel.merge(file.panel);
        }
        required(&self.data, "data")?;
        required(&self.out, "out")?;
        self.method.get_or_insert(Method::Dss);
        self.params.resolve(FIT_DEFAULTS)?;
        self.panel.resolve();
        self.max_iters.get_or_insert(FIT_MAX_ITERS);
        self.tol.get_or_insert(FitOptions::default().tol);
        self.initial_update.get_or_insert(InitialForm::FirstOrder);
        self.folds.get_or_insert(10);
        self.seed.get_or_insert(1);
        Ok(self)
    }

    pub fn fit_options(&self) -> FitOptions {
        fit_options(self.max_iters, self.tol, self.initial_update)
    }
}

fn fit_options(max_iters: Option<usize>, tol: Option<f64>, initial: Option<InitialForm>) -> FitOptions {
    let defaults = FitOptions::default();
    FitOptions {
        max_iters: max_iters.unwrap_or(defaults.max_iters),
        tol: tol.unwrap_or(defaults.tol),
        initial_update: match initial {
            Some(InitialForm::AsPrinted) => InitialUpdate::AsPrinted,
            _ => InitialUpdate::FirstOrder,
        },
        ..defaults
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed: fixes the true coefficient path and every replication's draws.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    /// Cross-validation folds of the LASSO cell.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl GridArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.take() {
            let file: GridArgs = read_config(&path)?;
            fill!(self, file; out, seed, replications, p, horizon, folds, max_iters, tol);
        }
        required(&self.out, "out")?;
        self.seed.get_or_insert(1);
        self.replications.get_or_insert(10);
        self.p.get_or_insert(50);
        self.horizon.get_or_insert(100);
        self.folds.get_or_insert(10);
        let defaults = FitOptions::default();
        self.max_iters.get_or_insert(defaults.max_iters);
        self.tol.get_or_insert(defaults.tol);
        Ok(self)
    }

    pub fn fit_options(&self) -> FitOptions {
        fit_options(self.max_iters, self.tol, None)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastArgs {
    /// Panel CSV; when absent a synthetic panel is simulated from --p, --T and --seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of rows in the first training window.
    #[arg(long)]
    pub split: Option<usize>,
    /// Comma-separated subset of dss, dlm, lasso.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
    /// Start each DSS refit from the previous origin's path.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub warm_start: Option<bool>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    /// Intermittent signal series of a simulated panel (one persistent series is always added).
    #[arg(long)]
    pub intermittent: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl ForecastArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.take() {
            let file: ForecastArgs = read_config(&path)?;
            fill!(
                self, file;
                data, out, split, methods, rule, warm_start, folds, seed, p, horizon, intermittent, max_iters, tol
            );
            self.params.merge(file.params);
            self.panel.merge(file.panel);
        }
        required(&self.out, "out")?;
        self.methods.get_or_insert_with(|| vec![Method::Dss, Method::Dlm, Method::Lasso]);
        self.params.resolve(FIT_DEFAULTS)?;
        self.panel.resolve();
        self.rule.get_or_insert(Rule::ProcessMean);
        self.warm_start.get_or_insert(false);
        self.folds.get_or_insert(10);
        self.seed.get_or_insert(1);
        if self.data.is_none() {
            self.p.get_or_insert(20);
            self.horizon.get_or_insert(120);
            self.intermittent.get_or_insert(2);
        }
        let defaults = FitOptions::default();
        self.max_iters.get_or_insert(defaults.max_iters);
        self.tol.get_or_insert(defaults.tol);
        Ok(self)
    }

    pub fn fit_options(&self) -> FitOptions {
        fit_options(self.max_iters, self.tol, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    /// Prospective penalty against the current value, for each previous value.
    Penalty,
    /// Selection thresholds against the neighbouring values.
    Threshold,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanArgs {
    #[arg(value_enum)]
    pub kind: Option<ScanKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Previous values to scan (penalty), comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub prev: Option<Vec<f64>>,
    /// Grid lower end.
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f64>,
    /// Grid upper end.
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    /// Regressor value (threshold scan).
    #[arg(long, allow_negative_numbers = true)]
    pub x: Option<f64>,
    /// Fixed next value (threshold scan); by default the next value equals the previous one.
    #[arg(long, allow_negative_numbers = true)]
    pub next: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl ScanArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(path) = self.config.take() {
            let file: ScanArgs = read_config(&path)?;
            fill!(self, file; kind, out, prev, lo, hi, points, x, next);
            self.params.merge(file.params);
        }
        let kind = required(&self.kind, "kind")?;
        required(&self.out, "out")?;
        self.params.resolve((0.9, 1.0, 10.0, 0.9))?;
        self.prev.get_or_insert_with(|| vec![0.0, 1.5]);
        self.lo.get_or_insert(-3.0);
        self.hi.get_or_insert(3.0);
        let points = *self.points.get_or_insert(if kind == ScanKind::Penalty { 601 } else { 121 });
        self.x.get_or_insert(1.0);
        let ordered = matches!((self.lo, self.hi), (Some(lo), Some(hi)) if lo < hi);
        if !ordered || points < 3 {
            return Err(DssError::Configuration("scan needs lo < hi and at least 3 points".into()));
        }
        Ok(self)
    }

    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi, n) = (self.lo.unwrap_or(-3.0), self.hi.unwrap_or(3.0), self.points.unwrap_or(3));
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}
