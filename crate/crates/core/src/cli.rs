//! Command-line front end: simulate, replay, report, verify and calibrate.
//!
//! Exit status is 0 on success, 2 when the run completed but the benchmark
//! gate failed or verification found violations, and 1 on any operational
//! error.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate;
use crate::capsule::{self, Engine, EngineError};
use crate::metrics::{MetricsError, DEFAULT_THRESHOLD_S};
use crate::model::ActivityEvent;
use crate::reference;
use crate::report::{RunReport, RunStamp};
use crate::signature::{self, CompositeKind};
use crate::sim::{self, BatchResult, SimConfig, SimError};
use crate::store::{self, CapsuleLog, StoreError};

pub const SEED_ENV: &str = "PROVCAP_SEED";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CAPSULE_LOG_FILE: &str = "capsules.jsonl";
pub const BATCHES_FILE: &str = "batches.json";
pub const SIGNATURES_FILE: &str = "signatures.json";

#[derive(Debug, Parser)]
#[command(
    name = "provcap",
    version,
    about = "Provenance capture and capsule binding simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Simulation config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed. PROVCAP_SEED, when set, overrides this.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Activity trace to replay, or to recount against when verifying.
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Capsule log to verify. Defaults to the one in --out.
    #[arg(long, global = true)]
    pub log: Option<PathBuf>,
    #[arg(long = "threshold-s", global = true, default_value_t = DEFAULT_THRESHOLD_S)]
    pub threshold_s: f64,
    /// Encapsulation workers; overrides the config (default 16).
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the workload and write trace, capsule log, batches and report.
    Simulate,
    /// Rebuild capsules from a stored trace and report detected signatures.
    Replay,
    /// Rewrite the report from a previous run's batches.
    Report,
    /// Check a capsule log's binding and record invariants.
    Verify,
    /// Fit a config to the published per-class measurements.
    Calibrate {
        /// Seeds to try when matching retry counts.
        #[arg(long, default_value_t = 10_000)]
        max_seeds: u64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("empty workload: the config defines no instances")]
    EmptyWorkload,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Completed runs either pass or fail their domain check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

/// Result of a command that ran to completion, with its console summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub outcome: Outcome,
    pub output: String,
}

impl Completion {
    fn new(outcome: Outcome, output: String) -> Self {
        Self { outcome, output }
    }
}

impl Outcome {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Outcome::Pass => ExitCode::SUCCESS,
            Outcome::Fail => ExitCode::from(2),
        }
    }
}

/// Resolved inputs of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub trace_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub threshold_s: f64,
    pub parallelism: Option<usize>,
}

impl RunManifest {
    /// `env_seed` is the raw value of PROVCAP_SEED, if set.
    pub fn resolve(cli: Cli, env_seed: Option<String>) -> Result<Self, CliError> {
        let seed = match env_seed {
            Some(raw) => Some(raw.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?),
            None => cli.seed,
        };
        if cli.parallelism == Some(0) {
            return Err(CliError::Usage("--parallelism must be at least 1".into()));
        }
        if !cli.threshold_s.is_finite() {
            return Err(CliError::Usage("--threshold-s must be finite".into()));
        }
        Ok(Self {
            command: cli.command,
            config_path: cli.config,
            seed,
            output_dir: cli.out,
            trace_path: cli.trace,
            log_path: cli.log,
            threshold_s: cli.threshold_s,
            parallelism: cli.parallelism,
        })
    }

    /// The config with command-line overrides applied.
    pub fn effective_config(&self) -> Result<SimConfig, CliError> {
        let path = self
            .config_path
            .as_deref()
            .ok_or_else(|| CliError::Usage("--config is required".into()))?;
        let mut config = load_config(path)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        config.validate().map_err(|e| CliError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Ok(config)
    }
}

pub fn load_config(path: &Path) -> Result<SimConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Machine-readable per-class results of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchesFile {
    pub stamp: RunStamp,
    pub config: SimConfig,
    pub batches: Vec<BatchResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedComposite {
    pub kind: CompositeKind,
    pub subject_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
    pub process_id: String,
    pub witness_events: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureReport {
    pub header: Vec<String>,
    pub file_created: usize,
    pub file_copied: usize,
    pub composites: Vec<DetectedComposite>,
}

impl SignatureReport {
    pub fn of(header: Vec<String>, trace: &[ActivityEvent]) -> Self {
        let composites: Vec<DetectedComposite> = signature::detect_signatures(trace)
            .into_iter()
            .map(|c| DetectedComposite {
                kind: c.kind,
                subject_path: c.subject_path.to_owned(),
                source_path: c.source_path.map(str::to_owned),
                process_id: c.process_id.to_owned(),
                witness_events: c.witness_events.to_vec(),
            })
            .collect();
        let count = |k| composites.iter().filter(|c| c.kind == k).count();
        Self {
            header,
            file_created: count(CompositeKind::FileCreated),
            file_copied: count(CompositeKind::FileCopied),
            composites,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("serializable");
    body.push('\n');
    fs::write(path, body).map_err(io_err(path))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn gate_summary(out: &mut String, report: &RunReport) {
    let g = &report.gate;
    let _ = writeln!(
        out,
        "mean encapsulation delay {:.4} s over {} instances, stddev {:.4} s",
        report.delays.mean_s, report.delays.n, report.delays.stddev_conventional
    );
    let _ = writeln!(
        out,
        "benchmark gate {} (threshold {} s, margin {:.4} s)",
        if g.pass { "PASS" } else { "FAIL" },
        g.threshold_s,
        g.margin_s
    );
}

fn gate_outcome(report: &RunReport) -> Outcome {
    if report.gate.pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

pub fn cmd_simulate(m: &RunManifest) -> Result<Completion, CliError> {
    let mut out = String::new();
    let config = m.effective_config()?;
    if config.total_instances() == 0 {
        return Err(CliError::EmptyWorkload);
    }
    let stamp = RunStamp::of(&config);
    let header = stamp.header();
    let dir = &m.output_dir;
    prepare_dir(dir)?;

    let run = sim::run(&config)?;
    store::write_trace(&dir.join(TRACE_FILE), &run.trace, Some(&header))?;
    let mut log = CapsuleLog::create(&dir.join(CAPSULE_LOG_FILE), Some(&header))?;
    for c in &run.capsules {
        log.append(&c.capsule, c.written_at_ms)?;
    }
    log.sync()?;
    write_json(
        &dir.join(BATCHES_FILE),
        &BatchesFile {
            stamp: stamp.clone(),
            config: config.clone(),
            batches: run.batches.clone(),
        },
    )?;
    let report = RunReport::build(stamp, config.parallelism, &run.batches, m.threshold_s)?;
    report.write_to(dir).map_err(io_err(dir))?;
    let _ = writeln!(
        out,
        "simulated {} instances: {} events, {} capsules written to {}",
        report.instances,
        run.trace.len(),
        log.len(),
        dir.display()
    );
    gate_summary(&mut out, &report);
    Ok(Completion::new(gate_outcome(&report), out))
}

pub fn cmd_report(m: &RunManifest) -> Result<Completion, CliError> {
    let mut out = String::new();
    let path = m.output_dir.join(BATCHES_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: BatchesFile = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if file.batches.iter().all(|b| b.samples.is_empty()) {
        return Err(CliError::EmptyWorkload);
    }
    let report = RunReport::build(
        file.stamp,
        file.config.parallelism,
        &file.batches,
        m.threshold_s,
    )?;
    report
        .write_to(&m.output_dir)
        .map_err(io_err(&m.output_dir))?;
    gate_summary(&mut out, &report);
    Ok(Completion::new(gate_outcome(&report), out))
}

pub fn cmd_replay(m: &RunManifest) -> Result<Completion, CliError> {
    let mut out = String::new();
    let trace_path = m
        .trace_path
        .as_deref()
        .ok_or_else(|| CliError::Usage("--trace is required".into()))?;
    let trace = store::load_trace(trace_path)?;
    let mut header = store::read_header(trace_path)?;
    if let Some(seed) = m.seed {
        header.push(format!("seed={seed}"));
    }
    if header.is_empty() {
        header.push("seed=none".into());
    }
    let dir = &m.output_dir;
    prepare_dir(dir)?;

    let engine = Engine::new();
    let workers = m.parallelism.unwrap_or(sim::DEFAULT_PARALLELISM);
    let summary = capsule::replay(&engine, &trace, workers)?;
    let mut capsules = engine.capsules();
    capsules.sort_by_key(|c| c.b_id);
    let mut log = CapsuleLog::create(&dir.join(CAPSULE_LOG_FILE), Some(&header.join("\n")))?;
    for cap in &capsules {
        let written_at = cap
            .records
            .iter()
            .map(|r| r.timestamp_ms)
            .max()
            .unwrap_or(0);
        log.append(cap, written_at)?;
    }
    log.sync()?;
    let signatures = SignatureReport::of(header, &trace);
    write_json(&dir.join(SIGNATURES_FILE), &signatures)?;
    let _ = writeln!(
        out,
        "replayed {} events into {} capsules; {} file-created and {} file-copied signatures",
        summary.recorded, summary.bound, signatures.file_created, signatures.file_copied
    );
    Ok(Completion::new(Outcome::Pass, out))
}

pub fn cmd_verify(m: &RunManifest) -> Result<Completion, CliError> {
    let mut out = String::new();
    let log_path = m
        .log_path
        .clone()
        .unwrap_or_else(|| m.output_dir.join(CAPSULE_LOG_FILE));
    let file = fs::File::open(&log_path).map_err(io_err(&log_path))?;
    let entries = store::read_entries(file)?;
    let trace = m.trace_path.as_deref().map(store::load_trace).transpose()?;
    let violations = store::audit(&entries, trace.as_deref());
    if violations.is_empty() {
        let _ = writeln!(
            out,
            "{}: {} entries, no violations",
            log_path.display(),
            entries.len()
        );
        return Ok(Completion::new(Outcome::Pass, out));
    }
    for v in &violations {
        let _ = writeln!(out, "violation: {v}");
    }
    let _ = writeln!(
        out,
        "{}: {} violations in {} entries",
        log_path.display(),
        violations.len(),
        entries.len()
    );
    Ok(Completion::new(Outcome::Fail, out))
}

/// Calibrated config as TOML, prefixed by a comment block with the fit.
pub fn calibrated_toml(base: &SimConfig, max_seeds: u64) -> Result<String, CliError> {
    let cal = calibrate::calibrate(base, &reference::TABLE1, max_seeds)?;
    let mut text = format!(
        "# Calibrated against the published per-class measurements.\n\
         # Seeds tried from {}: {}.\n\
         # size_mb  target_tgd_s  simulated_tgd_s  error   retries\n",
        base.seed, cal.seeds_tried
    );
    for c in &cal.classes {
        text.push_str(&format!(
            "# {:>7}  {:>12.1}  {:>15.3}  {:>+6.2}%  {}/{}\n",
            c.size_mb,
            c.target_tgd_s,
            c.simulated_tgd_s,
            c.relative_error * 100.0,
            c.simulated_retries,
            c.target_retries
        ));
    }
    text.push_str(&toml::to_string(&cal.config).expect("config serializes"));
    Ok(text)
}

pub fn cmd_calibrate(m: &RunManifest, max_seeds: u64) -> Result<Completion, CliError> {
    let base = m.effective_config()?;
    let out = calibrated_toml(&base, max_seeds)?;
    Ok(Completion::new(Outcome::Pass, out))
}

pub fn execute(m: &RunManifest) -> Result<Completion, CliError> {
    match m.command {
        Command::Simulate => cmd_simulate(m),
        Command::Replay => cmd_replay(m),
        Command::Report => cmd_report(m),
        Command::Verify => cmd_verify(m),
        Command::Calibrate { max_seeds } => cmd_calibrate(m, max_seeds),
    }
}

/// Parses the process arguments and environment, runs and maps the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = RunManifest::resolve(cli, std::env::var(SEED_ENV).ok()).and_then(|m| execute(&m));
    match result {
        Ok(done) => {
            print!("{}", done.output);
            done.outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
