//! `dss`: simulate, fit, replicate, forecast and scan from the command line.
//!
//! Exit codes: 0 clean, 2 configuration error, 3 data error, 4 numerical failure, 5 partial
//! results (some cells, origins or fits failed or did not converge; outputs are still written).

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{FitArgs, ForecastArgs, GridArgs, Method, ScanArgs, ScanKind, SimulateArgs};
use dss_core::baselines::{dlm_fit, lasso_expanding_path};
use dss_core::densities::transition_theta;
use dss_core::em::{fit_map, Dataset};
use dss_core::experiments::{
    default_dlm, load_panel_csv, run_forecast_experiment, run_replications, simulate_design, study_grid,
    write_panel_csv, DlmForecaster, DssForecaster, ForecastMethod, LassoForecaster, MethodSpec, ReplicationConfig,
    SyntheticDesign,
};
use dss_core::penalty::{grid_local_maxima, prospective_pen, pstar};
use dss_core::threshold::selection_thresholds;
use dss_core::{DssError, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dss", version, about = "Dynamic spike-and-slab variable selection for time-varying regressions")]
struct Cli {
    /// Worker threads for grid and forecast runs (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the synthetic design: dataset, true path, active mask.
    Simulate(SimulateArgs),
    /// Fit one method to a panel CSV.
    Fit(FitArgs),
    /// Replicated synthetic study over the prior grid plus the DLM and LASSO baselines.
    Grid(GridArgs),
    /// Expanding-window one-step-ahead forecasts and their MSFE paths.
    Forecast(ForecastArgs),
    /// Tabulate penalty or selection-threshold curves.
    Scan(ScanArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Clean,
    Partial,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Clean => "clean",
            Status::Partial => "partial",
        }
    }
}

fn exit_code(err: &DssError) -> u8 {
    if err.is_configuration() {
        2
    } else if err.is_data() {
        3
    } else {
        4
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    status: &'a str,
    config: &'a C,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    summary: serde_json::Value,
}

/// Output directory that remembers the files written into it.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| with_path(e, dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| with_path(e, &path))?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    fn manifest<C: Serialize>(
        mut self,
        command: &str,
        status: Status,
        config: &C,
        summary: serde_json::Value,
    ) -> Result<()> {
        self.written.push("manifest.json".into());
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            status: status.label(),
            config,
            outputs: std::mem::take(&mut self.written),
            summary,
        };
        let path = self.dir.join("manifest.json");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| with_path(e, &path))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn with_path(e: std::io::Error, path: &Path) -> DssError {
    DssError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn out_dir(path: &Option<PathBuf>) -> &Path {
    path.as_deref().expect("resolved configs always carry an output directory")
}

fn simulate(args: SimulateArgs) -> Result<Status> {
    let args = args.resolve()?;
    let (p, horizon, seed) = (args.p.unwrap(), args.horizon.unwrap(), args.seed.unwrap());
    let design = SyntheticDesign::default();
    if p <= design.signal_series() {
        return Err(DssError::Configuration(format!(
            "--p must be at least {}, got {p}",
            design.signal_series() + 1
        )));
    }
    let truth = simulate_design(&design, p, horizon, seed)?;
    let mut out = Outputs::create(out_dir(&args.out))?;
    let labels = truth.dataset.labels();
    write_panel_csv(&truth.dataset, out.file("dataset.csv")?)?;
    truth.true_path.write_csv(out.file("true_path.csv")?, &labels)?;
    truth.write_mask_csv(out.file("mask.csv")?)?;
    let summary = serde_json::json!({ "rejection_draws": truth.rejection_draws });
    out.manifest("simulate", Status::Clean, &args, summary)?;
    println!("simulated p = {p}, T = {horizon} (seed {seed}) into {}", out_dir(&args.out).display());
    Ok(Status::Clean)
}

fn load_data(path: &Path, panel: &config::PanelArgs) -> Result<Dataset> {
    Ok(load_panel_csv(path, &panel.options())?.dataset)
}

fn fit(args: FitArgs) -> Result<Status> {
    let args = args.resolve()?;
    let data = load_data(args.data.as_deref().unwrap(), &args.panel)?;
    let labels = data.labels();
    let method = args.method.unwrap();
    let mut out = Outputs::create(out_dir(&args.out))?;
    let (status, summary) = match method {
        Method::Dss => {
            let params = args.params.params()?;
            let result = fit_map(&data, &params, &args.fit_options())?;
            result.path.write_csv(out.file("coefficients.csv")?, &labels)?;
            result.weights.write_theta_csv(out.file("weights.csv")?, &labels)?;
            result.write_metadata_json(out.file("fit.json")?)?;
            let objective = result.objective_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "dss: objective {objective:.6} after {} iterations ({})",
                result.iterations,
                if result.converged { "converged" } else { "not converged" }
            );
            let status = if result.converged { Status::Clean } else { Status::Partial };
            let zeros = result.path.coefficients.iter().filter(|b| **b == 0.0).count();
            let summary = serde_json::json!({
                "objective": objective,
                "iterations": result.iterations,
                "converged": result.converged,
                "zero_coefficients": zeros,
            });
            (status, summary)
        }
        Method::Dlm => {
            let phi1 = args.params.phi1.unwrap();
            let lambda1 = args.params.lambda1.unwrap();
            let path = dlm_fit(&data, phi1, lambda1)?;
            path.write_csv(out.file("coefficients.csv")?, &labels)?;
            let summary = serde_json::json!({ "phi1": phi1, "lambda1": lambda1 });
            serde_json::to_writer_pretty(out.file("fit.json")?, &summary)?;
            println!("dlm: direct solve, 1 iteration");
            (Status::Clean, summary)
        }
        Method::Lasso => {
            let (folds, seed) = (args.folds.unwrap(), args.seed.unwrap());
            let path = lasso_expanding_path(&data, folds, seed)?;
            path.write_csv(out.file("coefficients.csv")?, &labels)?;
            let zeros = path.coefficients.iter().filter(|b| **b == 0.0).count();
            let summary = serde_json::json!({ "folds": folds, "seed": seed, "zero_coefficients": zeros });
            serde_json::to_writer_pretty(out.file("fit.json")?, &summary)?;
            println!("lasso: expanding window with {folds}-fold CV, {zeros} zero coefficients");
            (Status::Clean, summary)
        }
    };
    out.manifest("fit", status, &args, summary)?;
    Ok(status)
}

fn grid(args: GridArgs) -> Result<Status> {
    let args = args.resolve()?;
    let mut config = ReplicationConfig::synthetic_study(args.seed.unwrap());
    config.predictors = args.p.unwrap();
    config.horizon = args.horizon.unwrap();
    config.replications = args.replications.unwrap();
    config.fit_options = args.fit_options();
    config.cells = vec![default_dlm(), MethodSpec::Lasso { folds: args.folds.unwrap() }];
    config.cells.extend(study_grid().into_iter().map(|params| MethodSpec::Dss { params }));
    let report = run_replications(&config)?;
    let mut out = Outputs::create(out_dir(&args.out))?;
    report.write_csv(out.file("table.csv")?)?;
    serde_json::to_writer_pretty(out.file("runs.json")?, &report)?;
    let status = if report.partial() { Status::Partial } else { Status::Clean };
    let failed: usize = report.cells.iter().map(|c| c.failures.len()).sum();
    out.manifest("grid", status, &args, serde_json::json!({ "cells": report.cells.len(), "failed_runs": failed }))?;
    println!("{} cells x {} replications, {failed} failed runs", report.cells.len(), config.replications);
    Ok(status)
}

fn forecast(args: ForecastArgs) -> Result<Status> {
    let args = args.resolve()?;
    let data = match &args.data {
        Some(path) => load_data(path, &args.panel)?,
        None => {
            let design = SyntheticDesign {
                intermittent: args.intermittent.unwrap(),
                ..SyntheticDesign::default()
            };
            simulate_design(&design, args.p.unwrap(), args.horizon.unwrap(), args.seed.unwrap())?.dataset
        }
    };
    let split = args.split.unwrap_or(data.horizon() / 2);
    let params = args.params.params()?;
    let dss = DssForecaster {
        params,
        options: args.fit_options(),
        rule: args.rule.unwrap().into(),
        warm_start: args.warm_start.unwrap(),
    };
    let dlm = DlmForecaster {
        phi1: params.phi1,
        lambda1: params.lambda1,
    };
    let lasso = LassoForecaster {
        folds: args.folds.unwrap(),
        seed: args.seed.unwrap(),
    };
    let mut methods: Vec<&dyn ForecastMethod> = Vec::new();
    for m in args.methods.as_deref().unwrap() {
        let method: &dyn ForecastMethod = match m {
            Method::Dss => &dss,
            Method::Dlm => &dlm,
            Method::Lasso => &lasso,
        };
        if !methods.iter().any(|x| x.name() == method.name()) {
            methods.push(method);
        }
    }
    let report = run_forecast_experiment(&data, split, &methods)?;
    let mut out = Outputs::create(out_dir(&args.out))?;
    for m in &report.methods {
        m.write_csv(out.file(&format!("msfe_{}.csv", m.method))?)?;
    }
    let mut w = csv_writer(out.file("summary.csv")?);
    w.write_record(["method", "final_msfe", "failures", "runtime_s"])?;
    for m in &report.methods {
        let msfe = m.final_msfe.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([m.method.clone(), msfe, m.failures.len().to_string(), m.runtime_seconds.to_string()])?;
        println!("{:>6}: final MSFE {}", m.method, m.final_msfe.map_or("n/a".into(), |v| format!("{v:.6}")));
    }
    w.flush()?;
    drop(w);
    let status = if report.partial() { Status::Partial } else { Status::Clean };
    let failures: Vec<_> = report.methods.iter().flat_map(|m| m.failures.iter().map(move |f| format!("{}: {f}", m.method))).collect();
    let summary = serde_json::json!({ "split": split, "horizon": data.horizon(), "failures": failures });
    out.manifest("forecast", status, &args, summary)?;
    Ok(status)
}

fn scan(args: ScanArgs) -> Result<Status> {
    let args = args.resolve()?;
    let params = args.params.params()?;
    let grid = args.grid();
    let mut out = Outputs::create(out_dir(&args.out))?;
    let summary = match args.kind.unwrap() {
        ScanKind::Penalty => {
            let mut w = csv_writer(out.file("penalty.csv")?);
            w.write_record(["beta_prev", "beta", "pen", "pstar", "theta_prev"])?;
            let mut peaks = Vec::new();
            for &prev in args.prev.as_deref().unwrap() {
                let theta = transition_theta(prev, &params);
                for &b in &grid {
                    let cells = [prev, b, prospective_pen(b, prev, &params), pstar(b, prev, &params), theta];
                    w.write_record(cells.map(|v| v.to_string()))?;
                }
                let maxima = grid_local_maxima(|b| prospective_pen(b, prev, &params), &grid);
                peaks.push(serde_json::json!({
                    "beta_prev": prev,
                    "local_maxima": maxima,
                    "single_peak": maxima.len() == 1,
                }));
            }
            w.flush()?;
            drop(w);
            let mut w = csv_writer(out.file("peaks.csv")?);
            w.write_record(["beta_prev", "local_maxima", "locations"])?;
            for peak in &peaks {
                let locations: Vec<String> = peak["local_maxima"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|v| v.to_string())
                    .collect();
                w.write_record([peak["beta_prev"].to_string(), locations.len().to_string(), locations.join(";")])?;
            }
            w.flush()?;
            serde_json::json!({ "peaks": peaks })
        }
        ScanKind::Threshold => {
            let x = args.x.unwrap();
            let mut w = csv_writer(out.file("thresholds.csv")?);
            w.write_record(["beta_prev", "beta_next", "lower", "upper"])?;
            for &prev in &grid {
                let next = args.next.unwrap_or(prev);
                let band = selection_thresholds(x, prev, next, &params)?;
                w.write_record([prev, next, band.lower, band.upper].map(|v| v.to_string()))?;
            }
            w.flush()?;
            serde_json::Value::Null
        }
    };
    out.manifest("scan", Status::Clean, &args, summary)?;
    Ok(Status::Clean)
}

fn run(cli: Cli) -> Result<Status> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(DssError::Configuration("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DssError::Configuration(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Grid(a) => grid(a),
        Command::Forecast(a) => forecast(a),
        Command::Scan(a) => scan(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            eprintln!("warning: some results are missing; see the manifest");
            ExitCode::from(5)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
