//! Scenario configuration, seeded parallel replicate execution, persistence
//! and report generation.
//!
//! Seed derivation: replicate `r` uses `root(master_seed).derive(REPLICATE, r)`.
//! From that key, generation attempt `a` uses `derive(GENERATE, a)`,
//! missingness uses `derive(MISSINGNESS, 0)` and strategy `s` uses
//! `derive(STRATEGY, stable_hash(id(s)))`. Any replicate can therefore be
//! re-run in isolation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{generate_dataset, Dataset, GenerativeParams};
use crate::metrics::{self, CoverageMode, MetricsSummary};
use crate::missingness::{calibrated_intercepts, induce_missingness, AuxCoefficients, AuxMechanism, Mechanism, MdmSpec};
use crate::psm::{Adjustment, BalanceReport, BalanceSlice, Covariate};
use crate::rng::{stable_hash, stage, StreamKey};
use crate::strategies::{run_strategy, MethodKind, StrategySpec, VarianceMethod};

pub const SCHEMA_VERSION: u32 = 1;
/// Share of failed replicates, per strategy, above which a run aborts.
pub const MAX_FAILURE_SHARE: f64 = 0.20;
/// Generation attempts per replicate before the replicate counts as failed.
pub const GENERATION_ATTEMPTS: u64 = 10;

pub const REPLICATES_FILE: &str = "replicates.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("strategy {strategy}: {failed} of {nsim} replicates failed (first error: {first_error})")]
    TooManyFailures { strategy: String, failed: usize, nsim: usize, first_error: String },
    #[error("metrics for {strategy}: {source}")]
    Metrics { strategy: String, source: metrics::MetricsError },
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// On-disk configuration: one flat JSON object. Every key is optional
/// except `strategies`; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub label: Option<String>,
    pub nsim: usize,
    pub master_seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub truth: Option<f64>,

    pub n: usize,
    pub rho: f64,
    pub alpha0: Option<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta_t: f64,
    pub sigma_y: f64,
    pub delta02: f64,
    pub delta12: f64,
    pub delta0ps: f64,
    pub delta1ps: f64,
    pub sigma_z: f64,
    pub target_treated_fraction: f64,

    pub mechanism: Mechanism,
    pub gamma11: f64,
    pub gamma00: f64,
    pub target_missing_x2: f64,
    pub aux_mechanism: AuxMechanism,
    pub aux_coefficients: Option<AuxCoefficients>,
    pub target_missing_zps: f64,

    /// Strategy identifiers such as `cc` or `mi:derPassive:within:z2`.
    pub strategies: Vec<String>,
    pub m: usize,
    pub maxit: usize,
    pub pmm_donors: usize,
    pub variance: VarianceMethod,
    pub bootstrap_reps: usize,
    pub bootstrap_m: Option<usize>,
    pub coverage_mode: CoverageMode,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let g = GenerativeParams::default();
        let d = MdmSpec::default();
        let s = StrategySpec::common(MethodKind::FullData);
        ConfigFile {
            label: None,
            nsim: 1000,
            master_seed: 1,
            parallelism: 0,
            output_dir: PathBuf::from("results"),
            truth: None,
            n: g.n,
            rho: g.rho,
            alpha0: g.alpha0,
            alpha1: g.alpha1,
            alpha2: g.alpha2,
            beta0: g.beta0,
            beta1: g.beta1,
            beta2: g.beta2,
            beta_t: g.beta_t,
            sigma_y: g.sigma_y,
            delta02: g.delta02,
            delta12: g.delta12,
            delta0ps: g.delta0ps,
            delta1ps: g.delta1ps,
            sigma_z: g.sigma_z,
            target_treated_fraction: g.target_treated_fraction,
            mechanism: d.mechanism,
            gamma11: d.gamma11,
            gamma00: d.gamma00,
            target_missing_x2: d.target_missing_x2,
            aux_mechanism: d.aux_mechanism,
            aux_coefficients: d.aux_coefficients,
            target_missing_zps: d.target_missing_zps,
            strategies: Vec::new(),
            m: s.m,
            maxit: s.maxit,
            pmm_donors: s.pmm_donors,
            variance: s.variance,
            bootstrap_reps: s.bootstrap_reps,
            bootstrap_m: None,
            coverage_mode: CoverageMode::PerReplicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub label: String,
    pub generative: GenerativeParams,
    pub mdm: MdmSpec,
    pub strategies: Vec<StrategySpec>,
    pub nsim: usize,
    pub master_seed: u64,
    /// Worker threads; 0 picks the machine default.
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub truth: f64,
    pub coverage_mode: CoverageMode,
}

impl ConfigFile {
    pub fn into_scenario(self) -> Result<ScenarioConfig, HarnessError> {
        let generative = GenerativeParams {
            n: self.n,
            rho: self.rho,
            alpha0: self.alpha0,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta0: self.beta0,
            beta1: self.beta1,
            beta2: self.beta2,
            beta_t: self.beta_t,
            sigma_y: self.sigma_y,
            delta02: self.delta02,
            delta12: self.delta12,
            delta0ps: self.delta0ps,
            delta1ps: self.delta1ps,
            sigma_z: self.sigma_z,
            target_treated_fraction: self.target_treated_fraction,
        };
        let mdm = MdmSpec {
            mechanism: self.mechanism,
            gamma11: self.gamma11,
            gamma00: self.gamma00,
            target_missing_x2: self.target_missing_x2,
            aux_mechanism: self.aux_mechanism,
            aux_coefficients: self.aux_coefficients,
            target_missing_zps: self.target_missing_zps,
        };
        let strategies = self
            .strategies
            .iter()
            .map(|id| {
                let mut s: StrategySpec = id.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
                s.m = self.m;
                s.maxit = self.maxit;
                s.pmm_donors = self.pmm_donors;
                s.variance = self.variance;
                s.bootstrap_reps = self.bootstrap_reps;
                s.bootstrap_m = self.bootstrap_m;
                Ok(s)
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let label = self.label.unwrap_or_else(|| scenario_label(&mdm));
        let cfg = ScenarioConfig {
            label,
            truth: self.truth.unwrap_or(generative.beta_t),
            generative,
            mdm,
            strategies,
            nsim: self.nsim,
            master_seed: self.master_seed,
            parallelism: self.parallelism,
            output_dir: self.output_dir,
            coverage_mode: self.coverage_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `MAR2B` or `MAR2B+aux_MCAR`.
pub fn scenario_label(mdm: &MdmSpec) -> String {
    match mdm.aux_mechanism {
        AuxMechanism::None => mdm.mechanism.to_string(),
        aux => format!("{}+{}", mdm.mechanism, aux),
    }
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, HarnessError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    file.into_scenario()
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        if self.nsim < 2 {
            return cfg("nsim must be at least 2".into());
        }
        if self.strategies.is_empty() {
            return cfg("strategy list is empty".into());
        }
        if !self.truth.is_finite() {
            return cfg("truth must be finite".into());
        }
        self.generative.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.mdm.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut seen = HashSet::new();
        for s in &self.strategies {
            s.validate().map_err(|e| HarnessError::Config(format!("{s}: {e}")))?;
            if !seen.insert(s.to_string()) {
                return cfg(format!("duplicate strategy {s}"));
            }
        }
        Ok(())
    }

    /// Hash of everything that affects replicate records; parallelism and
    /// the output location are excluded.
    pub fn fingerprint(&self) -> u64 {
        let mut c = self.clone();
        c.parallelism = 0;
        c.output_dir = PathBuf::new();
        c.label = String::new();
        stable_hash(&serde_json::to_string(&c).expect("config serializes"))
    }

    pub fn replicate_key(&self, replicate: usize) -> StreamKey {
        StreamKey::root(self.master_seed).derive(stage::REPLICATE, replicate as u64)
    }
}

/// One strategy on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub strategy: String,
    pub att: Option<f64>,
    pub se_robust: Option<f64>,
    pub se_bootstrap: Option<f64>,
    pub n_pairs: Option<usize>,
    pub bootstrap_failures: usize,
    pub balance: Option<BalanceReport>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// The masked dataset of a replicate, exactly as strategies see it.
pub fn replicate_dataset(cfg: &ScenarioConfig, replicate: usize) -> Result<Dataset, String> {
    let key = cfg.replicate_key(replicate);
    let mut last = String::new();
    for attempt in 0..GENERATION_ATTEMPTS {
        match generate_dataset(&cfg.generative, &mut key.derive(stage::GENERATE, attempt).rng()) {
            Ok(d) => {
                return induce_missingness(&d, &cfg.mdm, &mut key.derive(stage::MISSINGNESS, 0).rng())
                    .map_err(|e| format!("missingness: {e}"));
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(format!("generation failed after {GENERATION_ATTEMPTS} attempts: {last}"))
}

pub fn strategy_key(cfg: &ScenarioConfig, replicate: usize, strategy: &StrategySpec) -> StreamKey {
    cfg.replicate_key(replicate).derive(stage::STRATEGY, stable_hash(&strategy.to_string()))
}

/// Every strategy of the scenario on replicate `r`, in config order.
pub fn run_replicate(cfg: &ScenarioConfig, replicate: usize) -> Vec<ReplicateRecord> {
    let data = replicate_dataset(cfg, replicate);
    cfg.strategies
        .iter()
        .map(|s| {
            let id = s.to_string();
            let failed = |e: String| ReplicateRecord {
                replicate,
                strategy: id.clone(),
                att: None,
                se_robust: None,
                se_bootstrap: None,
                n_pairs: None,
                bootstrap_failures: 0,
                balance: None,
                error: Some(e),
            };
            let d = match &data {
                Ok(d) => d,
                Err(e) => return failed(e.clone()),
            };
            match run_strategy(d, s, strategy_key(cfg, replicate, s)) {
                Ok(r) => ReplicateRecord {
                    replicate,
                    strategy: id.clone(),
                    att: Some(r.estimate.att),
                    se_robust: r.se_robust,
                    se_bootstrap: r.se_bootstrap,
                    n_pairs: Some(r.estimate.n_pairs),
                    bootstrap_failures: r.bootstrap_failures,
                    balance: Some(r.estimate.diagnostics),
                    error: None,
                },
                Err(e) => failed(e.to_string()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: StrategySpec,
    pub metrics: MetricsSummary,
    pub mean_se_robust: Option<f64>,
    pub mean_se_bootstrap: Option<f64>,
    /// Mean model variance over empirical variance, for the SE used in coverage.
    pub variance_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub schema_version: u32,
    pub software_version: String,
    pub config: ScenarioConfig,
    pub wall_clock_seconds: f64,
    pub summaries: Vec<StrategySummary>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl ScenarioResult {
    pub fn summary(&self, strategy_id: &str) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.metrics.strategy_id == strategy_id)
    }
}

#[derive(Serialize, Deserialize)]
struct JournalHeader {
    schema_version: u32,
    fingerprint: u64,
}

/// Append-only per-replicate log. One line per replicate, written with a
/// single `write_all`, so a crash loses at most the replicate in flight.
struct Journal {
    file: Mutex<File>,
}

impl Journal {
    fn open(path: &Path, fingerprint: u64, nstrategies: usize) -> Result<(Self, BTreeMap<usize, Vec<ReplicateRecord>>), HarnessError> {
        let mut done = BTreeMap::new();
        let mut reuse = false;
        if let Ok(f) = File::open(path) {
            let mut lines = BufReader::new(f).lines();
            if let Some(Ok(h)) = lines.next() {
                if let Ok(h) = serde_json::from_str::<JournalHeader>(&h) {
                    reuse = h.schema_version == SCHEMA_VERSION && h.fingerprint == fingerprint;
                }
            }
            if reuse {
                for line in lines.map_while(Result::ok) {
                    // a torn final line fails to parse and is recomputed
                    if let Ok(recs) = serde_json::from_str::<Vec<ReplicateRecord>>(&line) {
                        if recs.len() == nstrategies {
                            done.insert(recs[0].replicate, recs);
                        }
                    }
                }
            }
        }
        let file = if reuse {
            let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
            // terminate a possibly torn line
            f.write_all(b"\n").map_err(io_err(path))?;
            f
        } else {
            let mut f = File::create(path).map_err(io_err(path))?;
            let header = serde_json::to_string(&JournalHeader { schema_version: SCHEMA_VERSION, fingerprint })?;
            f.write_all(format!("{header}\n").as_bytes()).map_err(io_err(path))?;
            f
        };
        Ok((Journal { file: Mutex::new(file) }, done))
    }

    fn append(&self, recs: &[ReplicateRecord]) -> std::io::Result<()> {
        let mut line = serde_json::to_string(recs).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

/// Runs all replicates, writes `replicates.csv`, `summary.json` and the
/// journal to `cfg.output_dir`, and summarizes each strategy with the
/// full-data MSE as the relative-MSE reference.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let journal_path = out.join(JOURNAL_FILE);
    let (journal, mut done) = Journal::open(&journal_path, cfg.fingerprint(), cfg.strategies.len())?;
    done.retain(|&r, _| r < cfg.nsim);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if cfg.parallelism > 0 {
        builder = builder.num_threads(cfg.parallelism);
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;

    let todo: Vec<usize> = (0..cfg.nsim).filter(|r| !done.contains_key(r)).collect();
    let fresh: Vec<Result<(usize, Vec<ReplicateRecord>), HarnessError>> = pool.install(|| {
        todo.par_iter()
            .map(|&r| {
                let recs = run_replicate(cfg, r);
                journal.append(&recs).map_err(io_err(&journal_path))?;
                Ok((r, recs))
            })
            .collect()
    });
    for f in fresh {
        let (r, recs) = f?;
        done.insert(r, recs);
    }
    let records: Vec<ReplicateRecord> = done.into_values().flatten().collect();
    write_replicates_csv(&out.join(REPLICATES_FILE), &records)?;

    let summaries = summarize_records(cfg, &records)?;
    let result = ScenarioResult {
        schema_version: SCHEMA_VERSION,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        summaries,
        records,
    };
    let summary_path = out.join(SUMMARY_FILE);
    fs::write(&summary_path, serde_json::to_string_pretty(&result)?).map_err(io_err(&summary_path))?;
    Ok(result)
}

/// Per-strategy metrics; aborts when a strategy fails on more than
/// [`MAX_FAILURE_SHARE`] of replicates.
pub fn summarize_records(cfg: &ScenarioConfig, records: &[ReplicateRecord]) -> Result<Vec<StrategySummary>, HarnessError> {
    let ids: Vec<String> = cfg.strategies.iter().map(ToString::to_string).collect();
    for id in &ids {
        let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| &r.strategy == id).collect();
        let failed = mine.iter().filter(|r| r.failed()).count();
        if failed as f64 > MAX_FAILURE_SHARE * cfg.nsim as f64 {
            let first_error = mine.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(HarnessError::TooManyFailures { strategy: id.clone(), failed, nsim: cfg.nsim, first_error });
        }
    }

    let base = |id: &str, reference: Option<f64>, spec: &StrategySpec| -> Result<StrategySummary, HarnessError> {
        let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.strategy == id && !r.failed()).collect();
        let est: Vec<f64> = ok.iter().map(|r| r.att.unwrap_or(f64::NAN)).collect();
        let ses: Vec<f64> = ok
            .iter()
            .map(|r| if spec.variance.wants_bootstrap() { r.se_bootstrap } else { r.se_robust }.unwrap_or(f64::NAN))
            .collect();
        let mut m = metrics::summarize(id, &est, &ses, cfg.truth, reference, cfg.coverage_mode)
            .map_err(|source| HarnessError::Metrics { strategy: id.to_string(), source })?;
        m.n_failed = records.iter().filter(|r| r.strategy == id && r.failed()).count();
        let reports: Vec<BalanceReport> = ok.iter().filter_map(|r| r.balance.clone()).collect();
        if !reports.is_empty() {
            let b = BalanceReport::average(&reports);
            m.pct_matched_mean = Some(b.pct_treated_matched);
            m.balance = Some(b);
        }
        let mean_var = |f: fn(&ReplicateRecord) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).map(|s| s * s).collect();
            metrics::order_free_mean(&v).map(f64::sqrt)
        };
        let emp_var = m.empirical_se * m.empirical_se;
        Ok(StrategySummary {
            strategy: spec.clone(),
            variance_ratio: m.mean_model_se * m.mean_model_se / emp_var,
            mean_se_robust: mean_var(|r| r.se_robust),
            mean_se_bootstrap: mean_var(|r| r.se_bootstrap),
            metrics: m,
        })
    };

    let reference = match cfg.strategies.iter().position(|s| s.kind == MethodKind::FullData) {
        Some(i) => Some(base(&ids[i], None, &cfg.strategies[i])?.metrics.mse),
        None => None,
    };
    cfg.strategies.iter().zip(&ids).map(|(s, id)| base(id, reference.filter(|&r| r > 0.0), s)).collect()
}

fn balance_columns() -> Vec<(Covariate, BalanceSlice)> {
    [Covariate::X1, Covariate::X2].into_iter().flat_map(|c| BalanceSlice::ALL.into_iter().map(move |s| (c, s))).collect()
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (replicate, strategy), sorted by replicate then config order.
pub fn write_replicates_csv(path: &Path, records: &[ReplicateRecord]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let cols = balance_columns();
    let mut header: Vec<String> =
        ["replicate", "strategy", "att", "se_robust", "se_bootstrap", "n_pairs", "bootstrap_failures", "pct_treated_matched"]
            .map(String::from)
            .to_vec();
    header.extend(cols.iter().map(|(c, s)| format!("std_diff_{c}_{s}")));
    header.extend(["failed", "error"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.replicate.to_string(),
            r.strategy.clone(),
            fmt_opt(r.att),
            fmt_opt(r.se_robust),
            fmt_opt(r.se_bootstrap),
            fmt_opt(r.n_pairs),
            r.bootstrap_failures.to_string(),
            fmt_opt(r.balance.as_ref().map(|b| b.pct_treated_matched)),
        ];
        row.extend(cols.iter().map(|&(c, s)| fmt_opt(r.balance.as_ref().and_then(|b| b.get(c, s)))));
        row.push(r.failed().to_string());
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Calibrated quantities of a scenario, for dry runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub alpha0: f64,
    /// Missingness intercepts calibrated on the first replicate's dataset.
    pub gamma0: f64,
    pub eps0: Option<f64>,
}

pub fn calibrate(cfg: &ScenarioConfig) -> Result<Calibration, HarnessError> {
    cfg.validate()?;
    let alpha0 = cfg.generative.resolved_alpha0().map_err(|e| HarnessError::Config(e.to_string()))?;
    let key = cfg.replicate_key(0);
    let d = generate_dataset(&cfg.generative, &mut key.derive(stage::GENERATE, 0).rng())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let (gamma0, eps0) = calibrated_intercepts(&d, &cfg.mdm).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(Calibration { alpha0, gamma0, eps0 })
}

/// Loads `summary.json` from a result directory.
pub fn load_result(dir: &Path) -> Result<ScenarioResult, HarnessError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let schema = |message: String| HarnessError::Schema { path: path.clone(), message };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(schema(format!("schema version {v}, expected {SCHEMA_VERSION}"))),
        None => return Err(schema("missing schema_version".into())),
    }
    let result: ScenarioResult = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
    if result.summaries.is_empty() {
        return Err(schema("no strategies in result".into()));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

/// Rendered report plus plot-ready long-format data.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub main: String,
    /// `scenario,strategy,…,bias,variance,mse` rows for a bias/variance scatter.
    pub scatter_csv: String,
    /// Model-to-empirical variance ratios per SE kind.
    pub variance_ratio_csv: String,
}

struct Row<'a> {
    scenario: &'a str,
    s: &'a StrategySummary,
}

impl Row<'_> {
    fn method(&self) -> String {
        match self.s.strategy.kind {
            MethodKind::Mi => "MI".into(),
            k => k.to_string(),
        }
    }
    fn imputation(&self) -> String {
        fmt_opt(self.s.strategy.mi_imputation)
    }
    fn integration(&self) -> String {
        fmt_opt(self.s.strategy.mi_integration)
    }
    fn aux(&self) -> String {
        match self.s.strategy.include_aux {
            crate::strategies::AuxChoice::None => "-".into(),
            crate::strategies::AuxChoice::Z2 => "Z2".into(),
            crate::strategies::AuxChoice::Zps => "Zps".into(),
        }
    }
    fn order(&self) -> &'static str {
        match self.s.strategy.imputation_order {
            crate::strategies::ImputationOrder::Default => "default",
            crate::strategies::ImputationOrder::Reverse => "reverse",
        }
    }
}

pub fn report(results: &[ScenarioResult], format: ReportFormat) -> Result<Report, HarnessError> {
    let rows: Vec<Row> = results.iter().flat_map(|r| r.summaries.iter().map(move |s| Row { scenario: &r.config.label, s })).collect();
    let main = match format {
        ReportFormat::Table => render_table(&rows),
        ReportFormat::Csv => render_csv(&rows)?,
    };

    let mut scatter = csv::Writer::from_writer(Vec::new());
    scatter.write_record(["scenario", "strategy", "imputation", "integration", "aux", "bias", "variance", "mse"])?;
    let mut ratio = csv::Writer::from_writer(Vec::new());
    ratio.write_record(["scenario", "strategy", "se_kind", "model_variance", "empirical_variance", "ratio"])?;
    for row in &rows {
        let m = &row.s.metrics;
        let emp = m.empirical_se * m.empirical_se;
        scatter.write_record([
            row.scenario.to_string(),
            m.strategy_id.clone(),
            row.imputation(),
            row.integration(),
            row.aux(),
            m.bias.to_string(),
            emp.to_string(),
            m.mse.to_string(),
        ])?;
        for (kind, se) in [("robust", row.s.mean_se_robust), ("bootstrap", row.s.mean_se_bootstrap)] {
            if let Some(se) = se {
                let v = se * se;
                ratio.write_record([
                    row.scenario.to_string(),
                    m.strategy_id.clone(),
                    kind.to_string(),
                    v.to_string(),
                    emp.to_string(),
                    (v / emp).to_string(),
                ])?;
            }
        }
    }
    let utf8 = |w: csv::Writer<Vec<u8>>| -> Result<String, HarnessError> {
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    };
    Ok(Report { main, scatter_csv: utf8(scatter)?, variance_ratio_csv: utf8(ratio)? })
}

fn render_table(rows: &[Row]) -> String {
    let header = [
        "MDM", "Method", "Imputation", "Integration", "Aux", "Order", "Bias (MCSE)", "Emp SE", "Model SE", "MSE", "rMSE",
        "Coverage (MCSE)", "%Matched",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.s.metrics;
            vec![
                r.scenario.to_string(),
                r.method(),
                r.imputation(),
                r.integration(),
                r.aux(),
                r.order().to_string(),
                format!("{:.3} ({:.3})", m.bias, m.bias_mcse),
                format!("{:.3}", m.empirical_se),
                format!("{:.3}", m.mean_model_se),
                format!("{:.3}", m.mse),
                m.rmse_relative.map_or("-".into(), |v| format!("{v:.3}")),
                format!("{:.3} ({:.3}){}", m.coverage, m.coverage_mcse, if m.coverage_mode == CoverageMode::Approximate { "*" } else { "" }),
                m.pct_matched_mean.map_or("-".into(), |v| format!("{:.1}", 100.0 * v)),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..header.len()).map(|j| body.iter().map(|r| r[j].chars().count()).chain([header[j].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in &body {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    if rows.iter().any(|r| r.s.metrics.coverage_mode == CoverageMode::Approximate) {
        out.push_str("* approximate coverage from the mean estimate and mean variance\n");
    }
    out
}

fn render_csv(rows: &[Row]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scenario", "strategy", "method", "imputation", "integration", "aux", "order", "adjust", "bias", "bias_mcse",
        "empirical_se", "empirical_se_mcse", "mean_model_se", "mean_se_robust", "mean_se_bootstrap", "mse", "mse_mcse",
        "rmse_relative", "coverage", "coverage_mcse", "coverage_mode", "pct_matched", "n_replicates", "n_failed",
    ])?;
    for r in rows {
        let m = &r.s.metrics;
        w.write_record([
            r.scenario.to_string(),
            m.strategy_id.clone(),
            r.method(),
            r.imputation(),
            r.integration(),
            r.aux(),
            r.order().to_string(),
            if r.s.strategy.adjust == Adjustment::Adjusted { "adjusted" } else { "unadjusted" }.to_string(),
            m.bias.to_string(),
            m.bias_mcse.to_string(),
            m.empirical_se.to_string(),
            m.empirical_se_mcse.to_string(),
            m.mean_model_se.to_string(),
            fmt_opt(r.s.mean_se_robust),
            fmt_opt(r.s.mean_se_bootstrap),
            m.mse.to_string(),
            m.mse_mcse.to_string(),
            fmt_opt(m.rmse_relative),
            m.coverage.to_string(),
            m.coverage_mcse.to_string(),
            match m.coverage_mode {
                CoverageMode::PerReplicate => "per_replicate",
                CoverageMode::Approximate => "approximate",
            }
            .to_string(),
            fmt_opt(m.pct_matched_mean),
            m.n_replicates.to_string(),
            m.n_failed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(r#"{"strategies": ["cc"], "nsim": 5, "bogus": 1}"#).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = parse_config(r#"{"strategies": ["full_data", "mi:derPassive:within:z2"], "nsim": 5, "m": 3}"#).unwrap();
        assert_eq!(cfg.generative, GenerativeParams::default());
        assert_eq!(cfg.truth, 2.0);
        assert_eq!(cfg.strategies[1].m, 3);
        assert_eq!(cfg.label, "MCAR");
    }

    #[test]
    fn invalid_configs_rejected() {
        for text in [
            r#"{"strategies": [], "nsim": 5}"#,
            r#"{"strategies": ["cc"], "nsim": 1}"#,
            r#"{"strategies": ["cc", "cc"], "nsim": 5}"#,
            r#"{"strategies": ["mi:regActive:across2"], "nsim": 5}"#,
            r#"{"strategies": ["cc"], "nsim": 5, "aux_mechanism": "aux_MCAR"}"#,
        ] {
            assert!(parse_config(text).unwrap_err().is_config(), "{text}");
        }
    }

    #[test]
    fn fingerprint_ignores_execution_settings() {
        let a = parse_config(r#"{"strategies": ["cc"], "nsim": 5, "parallelism": 1}"#).unwrap();
        let b = parse_config(r#"{"strategies": ["cc"], "nsim": 5, "parallelism": 8, "output_dir": "x"}"#).unwrap();
        let c = parse_config(r#"{"strategies": ["cc"], "nsim": 5, "master_seed": 2}"#).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
