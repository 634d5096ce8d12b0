//! Batch front end: parses a config, runs one experiment plan and writes
//! CSV results plus a manifest that reproduces the run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_precoder::evaluation::{self, Algorithm, ExperimentResult};
use robust_precoder::io::write_records;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    parse_algorithms, parse_config, parse_config_str, ExperimentPlan, ResolvedConfig,
};
pub use error::{CliError, ErrorRecord, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Parser)]
#[command(
    name = "robust-precoder",
    version,
    about = "Robust massive MIMO precoder experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Average sum-rate per SNR point for each algorithm.
    Sweep(RunArgs),
    /// Per-iteration objective traces on the first data block.
    Converge(RunArgs),
    /// Sum-rate when the design assumes a wrong aging coefficient.
    Mismatch(RunArgs),
    /// Parse and validate a config, printing the resolved form as JSON.
    ValidateConfig { config: PathBuf },
    /// Re-execute the run described by a manifest.
    Rerun {
        manifest: PathBuf,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Comma list of alg1, alg2, alg3, rzf, slnr, wmmse, robust-rzf.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    /// Record fixed-point solver residuals.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plan {
    Sweep,
    Converge,
    Mismatch,
}

/// Everything needed to reproduce a run, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub plan: Plan,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub trace: bool,
    pub config: ResolvedConfig,
    pub config_sha256: String,
    pub outputs: Vec<String>,
    pub failed_slots: usize,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(plan: Plan, config: ResolvedConfig, trace: bool) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            plan,
            seed: config.system.seed,
            algorithms: config.experiment.algorithms.clone(),
            trace,
            config_sha256: config_hash(&config)?,
            config,
            outputs: Vec::new(),
            failed_slots: 0,
            warnings: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.seed != m.config.system.seed || m.algorithms != m.config.experiment.algorithms {
            return Err(CliError::Config(
                "manifest seed or algorithms disagree with its config".into(),
            ));
        }
        if config_hash(&m.config)? != m.config_sha256 {
            return Err(CliError::Config(
                "manifest config hash does not match its config".into(),
            ));
        }
        m.config.system.validate()?;
        Ok(m)
    }
}

/// SHA-256 of the canonical JSON form of the resolved config.
pub fn config_hash(config: &ResolvedConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_csv<T: Serialize>(
    dir: &Path,
    name: String,
    rows: &[T],
    outputs: &mut Vec<String>,
) -> Result<()> {
    let path = dir.join(&name);
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_records(std::io::BufWriter::new(file), rows)?;
    outputs.push(name);
    Ok(())
}

fn check_any(result: &ExperimentResult) -> Result<()> {
    if result.failed_slots > 0 && result.rates.is_empty() && result.traces.is_empty() {
        return Err(CliError::AllSlotsFailed(
            result.warnings.first().cloned().unwrap_or_default(),
        ));
    }
    Ok(())
}

/// Runs the manifest's plan, writing outputs into `out_dir`, and returns the
/// manifest with outputs and warnings filled in.
pub fn execute(mut manifest: RunManifest, out_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let cfg = &manifest.config;
    let opts = cfg.experiment.options(&cfg.profile, manifest.trace);
    let mut outputs = Vec::new();
    let mut warnings = Vec::new();
    let mut failed = 0;
    match manifest.plan {
        Plan::Sweep => {
            let r = evaluation::sweep_snr(
                &cfg.system,
                &manifest.algorithms,
                &cfg.system.snr_db,
                &opts,
            )?;
            check_any(&r)?;
            for &a in &manifest.algorithms {
                let rows: Vec<_> = r
                    .rates
                    .iter()
                    .filter(|x| x.algorithm == a.label())
                    .collect();
                write_csv(
                    out_dir,
                    format!("sweep_{}.csv", a.name()),
                    &rows,
                    &mut outputs,
                )?;
            }
            failed = r.failed_slots;
            warnings = r.warnings;
        }
        Plan::Converge => {
            let r = evaluation::convergence_study(&cfg.system, &manifest.algorithms, &opts)?;
            for &a in &manifest.algorithms {
                if !a.is_iterative() {
                    warnings.push(format!("{a} is not iterative and has no trace"));
                    continue;
                }
                let rows: Vec<_> = r
                    .traces
                    .iter()
                    .filter(|x| x.algorithm == a.label())
                    .collect();
                write_csv(
                    out_dir,
                    format!("converge_{}.csv", a.name()),
                    &rows,
                    &mut outputs,
                )?;
                if manifest.trace && a != Algorithm::Wmmse {
                    let rows: Vec<_> = r
                        .solver
                        .iter()
                        .filter(|x| x.algorithm == a.label())
                        .collect();
                    write_csv(
                        out_dir,
                        format!("solver_{}.csv", a.name()),
                        &rows,
                        &mut outputs,
                    )?;
                }
            }
        }
        Plan::Mismatch => {
            for &a in &manifest.algorithms {
                let rows = evaluation::alpha_mismatch_study(
                    &cfg.system,
                    cfg.experiment.true_alpha,
                    &cfg.experiment.assumed_alphas,
                    a,
                    &opts,
                )?;
                write_csv(
                    out_dir,
                    format!("mismatch_{}.csv", a.name()),
                    &rows,
                    &mut outputs,
                )?;
            }
        }
    }
    manifest.outputs = outputs;
    manifest.failed_slots = failed;
    manifest.warnings = warnings;
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

fn manifest_from_args(plan: Plan, args: &RunArgs) -> Result<RunManifest> {
    let mut config = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.system.seed = seed;
    }
    if let Some(names) = &args.algorithms {
        config.experiment.algorithms = parse_algorithms(names)?;
    }
    RunManifest::new(plan, config, args.trace)
}

/// Dispatches a parsed command; returns the directory that holds its
/// outputs, if any.
pub fn run(cli: &Cli) -> std::result::Result<(), (CliError, Option<PathBuf>)> {
    let (plan, args) = match &cli.command {
        Command::ValidateConfig { config } => {
            let c = parse_config(config).map_err(|e| (e, None))?;
            let text = serde_json::to_string_pretty(&c).map_err(|e| (e.into(), None))?;
            let _ = writeln!(std::io::stdout(), "{text}");
            return Ok(());
        }
        Command::Rerun { manifest, out_dir } => {
            let dir = out_dir
                .clone()
                .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
            let m = RunManifest::load(manifest).map_err(|e| (e, Some(dir.clone())))?;
            execute(m, &dir).map_err(|e| (e, Some(dir)))?;
            return Ok(());
        }
        Command::Sweep(a) => (Plan::Sweep, a),
        Command::Converge(a) => (Plan::Converge, a),
        Command::Mismatch(a) => (Plan::Mismatch, a),
    };
    let dir = args.out_dir.clone();
    let m = manifest_from_args(plan, args).map_err(|e| (e, Some(dir.clone())))?;
    let done = execute(m, &dir).map_err(|e| (e, Some(dir.clone())))?;
    for w in &done.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, dir)) => {
            let record = e.record();
            let json = serde_json::to_string_pretty(&record).unwrap_or_default();
            if let Some(d) = dir {
                if fs::create_dir_all(&d).is_ok() {
                    let _ = fs::write(d.join(ERROR_FILE), format!("{json}\n"));
                }
            }
            eprintln!("error: {e}");
            eprintln!("{json}");
            ExitCode::from(record.exit_code)
        }
    }
}
