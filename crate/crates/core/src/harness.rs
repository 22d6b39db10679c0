//! Experiment runner: expands a JSON config into a matrix of
//! (method, sampling, gamma, eta, seed) cells, runs them on a worker pool and
//! writes one CSV and one JSON manifest per cell, plus `index.json`.
//!
//! `compare` summarizes a finished output directory and `verify` runs the
//! trace diagnostics over every cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{check_all, check_gate_probability, check_theorem_bound, CheckReport, Constants};
use crate::error::{Error, Result};
use crate::optimizers::{
    run, theory_eta, EpochRow, GateConfig, Method, OptimizerConfig, Sampling, Schedule, ScheduleKind,
    DEFAULT_FIXED_DELTA,
};
use crate::problems::{estimate_constants, Problem, ProblemName, ProblemSpec};
use crate::sampling::rng_from_seed;

pub const CSV_HEADER: [&str; 10] = [
    "t",
    "eta_t",
    "loss",
    "grad_norm",
    "rgps_norm",
    "weighted_metric",
    "delta",
    "kappa",
    "gate_attempts",
    "grad_evals",
];

pub const INDEX_FILE: &str = "index.json";
pub const VERIFY_FILE: &str = "verify.json";

/// Method names accepted in a config. `adagrad` has no diagonal mode here
/// and runs as `adagrad_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[serde(rename = "shadagrad")]
    ShAdaGrad,
    #[serde(rename = "adagrad_f")]
    AdaGradF,
    #[serde(rename = "adagrad")]
    AdaGrad,
    Sgd,
}

impl MethodName {
    pub fn label(self) -> &'static str {
        match self {
            MethodName::ShAdaGrad => "shadagrad",
            MethodName::AdaGradF => "adagrad_f",
            MethodName::AdaGrad => "adagrad",
            MethodName::Sgd => "sgd",
        }
    }

    pub fn method(self) -> Method {
        match self {
            MethodName::ShAdaGrad => Method::ShAdaGrad,
            MethodName::AdaGradF | MethodName::AdaGrad => Method::AdaGradF,
            MethodName::Sgd => Method::Sgd,
        }
    }

    pub fn default_etas(self) -> Vec<f64> {
        match self {
            MethodName::AdaGrad => vec![0.1, 0.01, 0.001],
            _ => vec![1.0, 0.1, 0.01],
        }
    }

    pub fn default_schedule(self, sampling: Sampling) -> ScheduleKind {
        match (self, sampling) {
            (MethodName::Sgd, Sampling::Uniform) => ScheduleKind::InvSqrt,
            (MethodName::Sgd, Sampling::Shuffled) => ScheduleKind::InvCbrt,
            (MethodName::AdaGrad, _) => ScheduleKind::InvSqrt,
            _ => ScheduleKind::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingChoice {
    Shuffled,
    Uniform,
    Both,
}

impl SamplingChoice {
    fn expand(self) -> Vec<Sampling> {
        match self {
            SamplingChoice::Shuffled => vec![Sampling::Shuffled],
            SamplingChoice::Uniform => vec![Sampling::Uniform],
            SamplingChoice::Both => vec![Sampling::Uniform, Sampling::Shuffled],
        }
    }
}

/// A number, or the name of a quantity resolved against the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub method: MethodName,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingChoice,
    /// Defaults per method and sampling mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    /// Numbers or `"theory"`; defaults per method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etas: Option<Vec<Value>>,
    /// A number, `"m"`, `"d"` or `"n"`.
    #[serde(default = "default_gamma")]
    pub gamma: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_delta: Option<f64>,
    #[serde(default)]
    pub per_epoch_lowrank: bool,
}

impl OptimizerEntry {
    pub fn new(method: MethodName) -> Self {
        Self {
            method,
            sampling: default_sampling(),
            schedule: None,
            etas: None,
            gamma: default_gamma(),
            fixed_delta: None,
            per_epoch_lowrank: false,
        }
    }
}

fn default_sampling() -> SamplingChoice {
    SamplingChoice::Both
}

fn default_gamma() -> Value {
    Value::Named("d".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSettings {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_divisor")]
    pub divisor: f64,
    /// Overrides the resolved `c_sigma` for the gate only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_sigma: Option<f64>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

impl Default for GateSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            divisor: default_divisor(),
            c_sigma: None,
            max_attempts: default_max_attempts(),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_divisor() -> f64 {
    GateConfig::default().divisor
}

fn default_max_attempts() -> usize {
    GateConfig::default().max_attempts
}

/// Constant overrides. Anything left out comes from the problem's analytic
/// values or, failing that, from `estimate_constants`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_sigma: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ConstantSettings {
    fn default() -> Self {
        Self {
            l: None,
            g: None,
            c_sigma: None,
            samples: default_samples(),
            seed: 0,
        }
    }
}

fn default_samples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// Mini-batches per epoch.
    pub m: usize,
    #[serde(default = "default_optimizers")]
    pub optimizers: Vec<OptimizerEntry>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub gate: GateSettings,
    #[serde(default)]
    pub constants: ConstantSettings,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub diagnostics: bool,
    /// Log (and record) every theory hypothesis a cell breaks.
    #[serde(default)]
    pub theory_mode: bool,
    #[serde(default = "default_kappa_threshold")]
    pub kappa_threshold: f64,
    /// Defaults to `epochs * m`, enough for any complete run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Shuffles for the gate probability check during `verify`; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_trials: Option<usize>,
}

fn default_optimizers() -> Vec<OptimizerEntry> {
    [MethodName::Sgd, MethodName::AdaGradF, MethodName::ShAdaGrad]
        .into_iter()
        .map(OptimizerEntry::new)
        .collect()
}

fn default_epochs() -> usize {
    200
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_kappa_threshold() -> f64 {
    1e6
}

impl ExperimentConfig {
    /// Quartic sigmoid, n = 128, d = 16, m = 16, 200 epochs, 5 seeds, every
    /// method under both sampling modes with the default step-size grids.
    pub fn preset() -> Self {
        Self {
            problem: ProblemSpec {
                name: ProblemName::QuarticSigmoid,
                n: 128,
                d: Some(16),
                seed: 0,
                d_in: None,
                hidden: None,
                distinct: None,
            },
            m: 16,
            optimizers: default_optimizers(),
            epochs: default_epochs(),
            seeds: default_seeds(),
            gate: GateSettings::default(),
            constants: ConstantSettings::default(),
            out_dir: default_out_dir(),
            diagnostics: false,
            theory_mode: false,
            kappa_threshold: default_kappa_threshold(),
            history_cap: None,
            workers: None,
            gate_trials: None,
        }
    }

    /// Parses and validates a JSON config. Errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m", "must be >= 1"));
        }
        if !self.problem.n.is_multiple_of(self.m) {
            return Err(Error::config(
                "m",
                format!("{} instances cannot be split into {} equal batches", self.problem.n, self.m),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.optimizers.is_empty() {
            return Err(Error::config("optimizers", "must list at least one optimizer"));
        }
        if !(self.gate.divisor > 0.0) {
            return Err(Error::config("gate.divisor", "must be > 0"));
        }
        if self.gate.max_attempts == 0 {
            return Err(Error::config("gate.max_attempts", "must be >= 1"));
        }
        if let Some(c) = self.gate.c_sigma {
            if !(c >= 0.0) {
                return Err(Error::config("gate.c_sigma", "must be >= 0"));
            }
        }
        for (field, v) in [("l", self.constants.l), ("g", self.constants.g)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::config(format!("constants.{field}"), "must be positive"));
                }
            }
        }
        if let Some(c) = self.constants.c_sigma {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::config("constants.c_sigma", "must be >= 0"));
            }
        }
        if self.constants.samples < 2 {
            return Err(Error::config("constants.samples", "must be >= 2"));
        }
        if !(self.kappa_threshold > 0.0) {
            return Err(Error::config("kappa_threshold", "must be > 0"));
        }
        if self.history_cap == Some(0) {
            return Err(Error::config("history_cap", "must be >= 1"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be >= 1"));
        }
        if let Some(t) = self.gate_trials {
            if t < 100 {
                return Err(Error::config("gate_trials", "must be >= 100"));
            }
        }
        for (i, o) in self.optimizers.iter().enumerate() {
            let at = |f: &str| format!("optimizers[{i}].{f}");
            if let Some(etas) = &o.etas {
                if etas.is_empty() {
                    return Err(Error::config(at("etas"), "must not be empty"));
                }
                for (k, e) in etas.iter().enumerate() {
                    match e {
                        Value::Number(v) if *v >= 0.0 && v.is_finite() => {}
                        Value::Named(s) if s == "theory" => {}
                        _ => {
                            return Err(Error::config(
                                format!("optimizers[{i}].etas[{k}]"),
                                "expected a step size >= 0 or \"theory\"",
                            ))
                        }
                    }
                }
            }
            match &o.gamma {
                Value::Number(v) if *v > 0.0 && v.is_finite() => {}
                Value::Named(s) if matches!(s.as_str(), "m" | "d" | "n") => {}
                _ => return Err(Error::config(at("gamma"), "expected a positive number, \"m\", \"d\" or \"n\"")),
            }
            if let Some(d) = o.fixed_delta {
                if o.method.method() != Method::AdaGradF {
                    return Err(Error::config(at("fixed_delta"), "only adagrad_f takes a fixed perturbation"));
                }
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::config(at("fixed_delta"), "must be >= 0"));
                }
            }
            if o.per_epoch_lowrank && o.method == MethodName::Sgd {
                return Err(Error::config(at("per_epoch_lowrank"), "sgd keeps no history"));
            }
        }
        Ok(())
    }

    pub fn history_cap(&self) -> usize {
        self.history_cap.unwrap_or(self.epochs * self.m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Config,
    Declared,
    Estimated,
}

/// Constants a run was configured and checked with, and where each came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConstants {
    pub l: f64,
    pub l_source: Source,
    pub g: f64,
    pub g_source: Source,
    pub c_sigma: f64,
    pub c_sigma_source: Source,
}

impl ResolvedConstants {
    /// The set used by the diagnostics. An estimated `G` is dropped so the
    /// checks fall back to the observed maximum of the run itself.
    pub fn for_checks(&self) -> Constants {
        Constants {
            l: self.l,
            g: (self.g_source != Source::Estimated).then_some(self.g),
            c_sigma: self.c_sigma,
        }
    }
}

pub fn resolve_constants(p: &Problem, settings: &ConstantSettings) -> Result<ResolvedConstants> {
    let need_estimate = (settings.l.is_none() && p.declared_l().is_none())
        || (settings.g.is_none() && p.declared_g().is_none())
        || settings.c_sigma.is_none();
    let est = if need_estimate {
        Some(estimate_constants(p, settings.samples, &mut rng_from_seed(settings.seed))?)
    } else {
        None
    };
    let pick = |cfg: Option<f64>, declared: Option<f64>, estimated: Option<f64>| match (cfg, declared) {
        (Some(v), _) => (v, Source::Config),
        (None, Some(v)) => (v, Source::Declared),
        (None, None) => (estimated.expect("estimate computed when needed"), Source::Estimated),
    };
    let (l, l_source) = pick(settings.l, p.declared_l(), est.map(|e| e.l));
    let (g, g_source) = pick(settings.g, p.declared_g(), est.map(|e| e.g));
    let (c_sigma, c_sigma_source) = pick(settings.c_sigma, None, est.map(|e| e.c_sigma));
    Ok(ResolvedConstants {
        l,
        l_source,
        g,
        g_source,
        c_sigma,
        c_sigma_source,
    })
}

/// One fully resolved run of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub label: String,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub warnings: Vec<String>,
}

pub fn cell_name(label: &str, sampling: Sampling, gamma: f64, eta: f64, seed: u64) -> String {
    format!("{label}_{}_gamma{gamma}_eta{eta}_seed{seed}", sampling.suffix())
}

/// Expands the optimizer matrix in config order: entry, sampling, eta, seed.
pub fn plan(cfg: &ExperimentConfig, p: &Problem, k: &ResolvedConstants) -> Result<Vec<Cell>> {
    let n = p.n();
    let mut cells = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, entry) in cfg.optimizers.iter().enumerate() {
        let mut base_warnings = Vec::new();
        if entry.method == MethodName::AdaGrad {
            let w = "adagrad has no diagonal mode here; running it as adagrad_f".to_string();
            log::warn!("optimizers[{i}]: {w}");
            base_warnings.push(w);
        }
        let gamma = match &entry.gamma {
            Value::Number(v) => *v,
            Value::Named(s) => match s.as_str() {
                "m" => cfg.m as f64,
                "n" => n as f64,
                _ => p.dim() as f64,
            },
        };
        let etas: Vec<f64> = match &entry.etas {
            None => entry.method.default_etas(),
            Some(list) => list
                .iter()
                .map(|v| match v {
                    Value::Number(e) => *e,
                    Value::Named(_) => theory_eta(n, k.l, k.g, k.c_sigma),
                })
                .collect(),
        };
        for sampling in entry.sampling.expand() {
            let kind = entry.schedule.unwrap_or_else(|| entry.method.default_schedule(sampling));
            for &eta in &etas {
                let schedule = Schedule::new(kind, eta).map_err(|e| Error::config(format!("optimizers[{i}].etas"), e.to_string()))?;
                let mut opt = match entry.method.method() {
                    Method::ShAdaGrad => {
                        let gate = cfg.gate.enabled.then(|| GateConfig {
                            divisor: cfg.gate.divisor,
                            c_sigma: cfg.gate.c_sigma.unwrap_or(k.c_sigma),
                            max_attempts: cfg.gate.max_attempts,
                        });
                        OptimizerConfig::shadagrad(cfg.m, schedule, gamma).with_gate(gate)
                    }
                    Method::AdaGradF => OptimizerConfig::adagrad_f(
                        cfg.m,
                        schedule,
                        gamma,
                        entry.fixed_delta.unwrap_or(DEFAULT_FIXED_DELTA),
                    ),
                    Method::Sgd => {
                        let mut o = OptimizerConfig::sgd(cfg.m, schedule);
                        o.gamma = gamma;
                        o
                    }
                }
                .with_sampling(sampling)
                .with_per_epoch_lowrank(entry.per_epoch_lowrank);
                if opt.method != Method::Sgd {
                    opt = opt.with_history_cap(cfg.history_cap());
                }
                opt.validate(n).map_err(|e| Error::config(format!("optimizers[{i}]"), e.to_string()))?;
                let mut warnings = base_warnings.clone();
                if cfg.theory_mode {
                    for w in opt.theory_warnings(n, k.l, k.g, k.c_sigma) {
                        log::warn!("optimizers[{i}] eta {eta}: {w}");
                        warnings.push(w);
                    }
                }
                for &seed in &cfg.seeds {
                    let name = cell_name(entry.method.label(), sampling, gamma, eta, seed);
                    if let Some(prev) = seen.insert(name.clone(), i) {
                        return Err(Error::config(
                            format!("optimizers[{i}]"),
                            format!("cell {name} duplicates one from optimizers[{prev}]"),
                        ));
                    }
                    cells.push(Cell {
                        name,
                        label: entry.method.label().to_string(),
                        optimizer: opt.clone(),
                        seed,
                        warnings: warnings.clone(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub min_grad_norm: f64,
    pub final_weighted_metric: f64,
    pub total_gate_attempts: usize,
    pub grad_evals: u64,
}

impl CellSummary {
    pub fn from_rows(rows: &[EpochRow]) -> Option<Self> {
        let last = rows.last()?;
        Some(Self {
            epochs_run: rows.len(),
            final_loss: last.loss,
            min_grad_norm: rows.iter().map(|r| r.grad_norm).fold(f64::INFINITY, f64::min),
            final_weighted_metric: last.weighted_metric,
            total_gate_attempts: rows.iter().map(|r| r.gate_attempts).sum(),
            grad_evals: last.grad_evals,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub name: String,
    pub label: String,
    pub problem: ProblemSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub constants: ResolvedConstants,
    pub complete: bool,
    pub failure: Option<String>,
    pub warnings: Vec<String>,
    pub summary: Option<CellSummary>,
    /// Present when diagnostics ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<CheckReport>>,
    /// Reported, never counted as violations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub informational: Option<Vec<CheckReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub csv: String,
    pub manifest: String,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub problem: ProblemSpec,
    pub epochs: usize,
    pub constants: ResolvedConstants,
    pub cells: Vec<IndexEntry>,
}

/// A cell as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub manifest: CellManifest,
    pub rows: Vec<EpochRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub out_dir: PathBuf,
    pub index: Index,
    pub records: Vec<CellRecord>,
}

impl ExperimentOutput {
    pub fn incomplete(&self) -> usize {
        self.records.iter().filter(|r| !r.manifest.complete).count()
    }
}

pub fn write_rows(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Io(format!("{}: unexpected CSV header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

fn run_cell(
    cfg: &ExperimentConfig,
    p: &Problem,
    k: &ResolvedConstants,
    cell: &Cell,
    out: &Path,
) -> Result<CellRecord> {
    let record = run(p, &cell.optimizer, cfg.epochs, cell.seed)?;
    let (checks, informational) = if cfg.diagnostics {
        let c = k.for_checks();
        (
            Some(check_all(&record, p, &c, cfg.kappa_threshold)?),
            Some(vec![check_theorem_bound(&record, p, &c)?]),
        )
    } else {
        (None, None)
    };
    let manifest = CellManifest {
        name: cell.name.clone(),
        label: cell.label.clone(),
        problem: p.spec().cloned().expect("harness problems are built from a spec"),
        optimizer: cell.optimizer.clone(),
        epochs: cfg.epochs,
        seed: cell.seed,
        constants: *k,
        complete: record.complete,
        failure: record.failure.clone(),
        warnings: cell.warnings.clone(),
        summary: CellSummary::from_rows(&record.rows),
        checks,
        informational,
    };
    write_rows(&out.join(format!("{}.csv", cell.name)), &record.rows)?;
    write_json(&out.join(format!("{}.json", cell.name)), &manifest)?;
    Ok(CellRecord {
        manifest,
        rows: record.rows,
    })
}

/// Runs every cell of the matrix into `out_dir` (or the config's own).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>, workers: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let p = cfg.problem.build()?;
    let k = resolve_constants(&p, &cfg.constants)?;
    let cells = plan(cfg, &p, &k)?;
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    log::info!("running {} cells into {}", cells.len(), out.display());
    let records: Vec<CellRecord> = pool(workers.or(cfg.workers))?.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(cfg, &p, &k, c, &out))
            .collect::<Result<Vec<_>>>()
    })?;
    for r in records.iter().filter(|r| !r.manifest.complete) {
        log::warn!("{} incomplete: {}", r.manifest.name, r.manifest.failure.as_deref().unwrap_or("?"));
    }
    let index = Index {
        problem: cfg.problem.clone(),
        epochs: cfg.epochs,
        constants: k,
        cells: records
            .iter()
            .map(|r| IndexEntry {
                name: r.manifest.name.clone(),
                csv: format!("{}.csv", r.manifest.name),
                manifest: format!("{}.json", r.manifest.name),
                complete: r.manifest.complete,
            })
            .collect(),
    };
    write_json(&out.join(INDEX_FILE), &index)?;
    Ok(ExperimentOutput {
        out_dir: out,
        index,
        records,
    })
}

/// Reads every cell listed in `dir/index.json`.
pub fn load_records(dir: &Path) -> Result<Vec<CellRecord>> {
    let index: Index = read_json(&dir.join(INDEX_FILE))?;
    index
        .cells
        .iter()
        .map(|e| {
            Ok(CellRecord {
                manifest: read_json(&dir.join(&e.manifest))?,
                rows: read_rows(&dir.join(&e.csv))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub label: String,
    pub sampling: Sampling,
    pub gamma: f64,
    pub eta: f64,
    pub seed: u64,
    pub epochs_run: usize,
    pub complete: bool,
    pub final_loss: f64,
    pub min_grad_norm: f64,
    pub final_weighted_metric: f64,
    /// First epoch whose weighted metric is at most `eps`; `epochs + 1` if none.
    pub epochs_to_eps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEta {
    pub label: String,
    pub sampling: Sampling,
    pub gamma: f64,
    pub eta: f64,
    pub median_final_weighted_metric: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub eps: f64,
    pub rows: Vec<SummaryRow>,
    pub best: Vec<BestEta>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Per-cell summary and best step size per (method, sampling, gamma) by
/// median final weighted metric over seeds.
pub fn compare(records: &[CellRecord], eps: f64) -> Result<Comparison> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("compare needs at least one record".into()))?;
    for r in records {
        if r.manifest.problem != first.manifest.problem {
            return Err(Error::Incompatible(format!(
                "{} was run on {:?}, {} on {:?}",
                first.manifest.name, first.manifest.problem, r.manifest.name, r.manifest.problem
            )));
        }
    }
    let rows: Vec<SummaryRow> = records
        .iter()
        .map(|r| {
            let m = &r.manifest;
            let s = CellSummary::from_rows(&r.rows);
            let nan = f64::NAN;
            SummaryRow {
                name: m.name.clone(),
                label: m.label.clone(),
                sampling: m.optimizer.sampling,
                gamma: m.optimizer.gamma,
                eta: m.optimizer.schedule.eta,
                seed: m.seed,
                epochs_run: r.rows.len(),
                complete: m.complete,
                final_loss: s.as_ref().map_or(nan, |s| s.final_loss),
                min_grad_norm: s.as_ref().map_or(nan, |s| s.min_grad_norm),
                final_weighted_metric: s.as_ref().map_or(nan, |s| s.final_weighted_metric),
                epochs_to_eps: r
                    .rows
                    .iter()
                    .find(|row| row.weighted_metric <= eps)
                    .map_or(m.epochs + 1, |row| row.t),
            }
        })
        .collect();

    // group key keeps first-seen order
    type Group = ((String, Sampling, u64), BTreeMap<u64, (f64, Vec<f64>)>);
    let mut groups: Vec<Group> = Vec::new();
    for r in &rows {
        let key = (r.label.clone(), r.sampling, r.gamma.to_bits());
        let pos = match groups.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                groups.push((key, BTreeMap::new()));
                groups.len() - 1
            }
        };
        groups[pos]
            .1
            .entry(r.eta.to_bits())
            .or_insert_with(|| (r.eta, Vec::new()))
            .1
            .push(r.final_weighted_metric);
    }
    let best = groups
        .into_iter()
        .filter_map(|((label, sampling, gamma), etas)| {
            etas.values()
                .map(|(eta, v)| (*eta, median(v), v.len()))
                .filter(|(_, med, _)| !med.is_nan())
                .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)))
                .map(|(eta, med, seeds)| BestEta {
                    label,
                    sampling,
                    gamma: f64::from_bits(gamma),
                    eta,
                    median_final_weighted_metric: med,
                    seeds,
                })
        })
        .collect();
    Ok(Comparison { eps, rows, best })
}

impl Comparison {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let head = ["cell", "done", "final_loss", "min_grad", "final_wm", "t_eps"];
        let mut cells: Vec<[String; 6]> = vec![head.map(str::to_string)];
        for r in &self.rows {
            cells.push([
                r.name.clone(),
                if r.complete { "yes" } else { "no" }.to_string(),
                format!("{:.6e}", r.final_loss),
                format!("{:.6e}", r.min_grad_norm),
                format!("{:.6e}", r.final_weighted_metric),
                r.epochs_to_eps.to_string(),
            ]);
        }
        let mut widths = [0usize; 6];
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        writeln!(out, "\nbest eta (median final weighted metric, eps = {:e}):", self.eps).unwrap();
        for b in &self.best {
            writeln!(
                out,
                "  {}_{} gamma {}: eta {} -> {:.6e} over {} seeds",
                b.label,
                b.sampling.suffix(),
                b.gamma,
                b.eta,
                b.median_final_weighted_metric,
                b.seeds
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellChecks {
    pub name: String,
    pub complete: bool,
    pub checks: Vec<CheckReport>,
    pub informational: Vec<CheckReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyBundle {
    pub cells: Vec<CellChecks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_probability: Option<CheckReport>,
}

impl VerifyBundle {
    /// Violations over every applicable check; informational reports excluded.
    pub fn violations(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| &c.checks)
            .chain(&self.gate_probability)
            .filter(|r| !r.not_applicable)
            .map(|r| r.violations)
            .sum()
    }
}

/// Runs the matrix with diagnostics and writes `verify.json` next to the
/// cell files. With diagnostics off nothing runs and the bundle is empty.
pub fn verify(cfg: &ExperimentConfig, out_dir: Option<&Path>, workers: Option<usize>) -> Result<VerifyBundle> {
    cfg.validate()?;
    if !cfg.diagnostics {
        return Ok(VerifyBundle::default());
    }
    let out = run_experiment(cfg, out_dir, workers)?;
    let mut bundle = VerifyBundle {
        cells: out
            .records
            .iter()
            .map(|r| CellChecks {
                name: r.manifest.name.clone(),
                complete: r.manifest.complete,
                checks: r.manifest.checks.clone().unwrap_or_default(),
                informational: r.manifest.informational.clone().unwrap_or_default(),
            })
            .collect(),
        gate_probability: None,
    };
    if let Some(trials) = cfg.gate_trials {
        let p = cfg.problem.build()?;
        let k = out.index.constants;
        let mut rng = rng_from_seed(cfg.constants.seed);
        bundle.gate_probability =
            Some(check_gate_probability(&p, p.initial_point(), cfg.m, trials, &mut rng, k.c_sigma, k.g)?);
    }
    write_json(&out.out_dir.join(VERIFY_FILE), &bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3}, "m": 4,
                "optimizers": [{"method": "sgd", "sampling": "shuffled", "etas": [0.1]}],
                "epochs": 1, "seeds": [0]}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = tiny();
        assert_eq!(c.gate, GateSettings::default());
        assert_eq!(c.kappa_threshold, 1e6);
        assert_eq!(c.history_cap(), 4);
        let p = ExperimentConfig::preset();
        assert_eq!((p.epochs, p.seeds.len(), p.m), (200, 5, 16));
        p.validate().unwrap();
    }

    #[test]
    fn config_errors_carry_paths() {
        let bad = r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3}, "m": 4,
                      "optimizers": [{"method": "sgd", "etas": [0.1, "fast"]}]}"#;
        match ExperimentConfig::from_json(bad).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "optimizers[0].etas[1]"),
            e => panic!("{e}"),
        }
        let bad = r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3, "colour": 1}, "m": 4}"#;
        match ExperimentConfig::from_json(bad).unwrap_err() {
            Error::Config { path, .. } => assert!(path.starts_with("problem"), "{path}"),
            e => panic!("{e}"),
        }
        let bad = r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3}, "m": 3}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config { path, .. }) if path == "m"));
        let bad = r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3}, "m": 4,
                      "optimizers": [{"method": "sgd", "gamma": "big"}]}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config { path, .. }) if path == "optimizers[0].gamma"));
    }

    #[test]
    fn plan_expands_defaults() {
        let mut c = tiny();
        c.optimizers = vec![OptimizerEntry::new(MethodName::Sgd), OptimizerEntry::new(MethodName::ShAdaGrad)];
        c.seeds = vec![0, 1];
        let p = c.problem.build().unwrap();
        let k = resolve_constants(&p, &c.constants).unwrap();
        let cells = plan(&c, &p, &k).unwrap();
        assert_eq!(cells.len(), 2 * 2 * 3 * 2);
        assert_eq!(cells[0].name, "sgd_u_gamma3_eta1_seed0");
        assert_eq!(cells[0].optimizer.schedule.kind, ScheduleKind::InvSqrt);
        let s = cells.iter().find(|c| c.name == "sgd_s_gamma3_eta0.1_seed1").unwrap();
        assert_eq!(s.optimizer.schedule.kind, ScheduleKind::InvCbrt);
        let sh = cells.iter().find(|c| c.label == "shadagrad").unwrap();
        assert_eq!(sh.optimizer.schedule.kind, ScheduleKind::Constant);
        assert_eq!(sh.optimizer.gate.unwrap().c_sigma, k.c_sigma);
        assert_eq!(sh.optimizer.history_cap, Some(4));
    }

    #[test]
    fn adagrad_rows_map_to_full_matrix() {
        let mut c = tiny();
        c.optimizers = vec![OptimizerEntry::new(MethodName::AdaGrad)];
        let p = c.problem.build().unwrap();
        let k = resolve_constants(&p, &c.constants).unwrap();
        let cells = plan(&c, &p, &k).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.optimizer.method == Method::AdaGradF && !c.warnings.is_empty()));
        assert_eq!(cells[0].optimizer.schedule, Schedule { kind: ScheduleKind::InvSqrt, eta: 0.1 });
    }

    #[test]
    fn duplicate_cells_rejected() {
        let mut c = tiny();
        c.optimizers.push(c.optimizers[0].clone());
        let p = c.problem.build().unwrap();
        let k = resolve_constants(&p, &c.constants).unwrap();
        assert!(matches!(plan(&c, &p, &k), Err(Error::Config { path, .. }) if path == "optimizers[1]"));
    }

    #[test]
    fn theory_eta_resolves() {
        let mut c = tiny();
        c.optimizers[0].etas = Some(vec![Value::Named("theory".into())]);
        c.constants.c_sigma = Some(0.2);
        let p = c.problem.build().unwrap();
        let k = resolve_constants(&p, &c.constants).unwrap();
        assert_eq!(k.c_sigma_source, Source::Config);
        assert_eq!(k.l_source, Source::Declared);
        let cells = plan(&c, &p, &k).unwrap();
        assert_eq!(cells[0].optimizer.schedule.eta, theory_eta(8, k.l, k.g, 0.2));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
