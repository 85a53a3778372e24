//! Command-line front end: `register`, `simulate`, `evaluate`, `dump-matrices`.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 unreadable or
//! invalid input, 3 degenerate registration under `--strict`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EngineConfig};
use crate::dtw::Grid;
use crate::metrics::{self, MetricsError, RegistrationEstimate};
use crate::pipeline::{register, Registration, RegistrationError};
use crate::pullback::{parse_pullback, write_pullback, Modality, PullbackError};
use crate::synth::{generate_pair, SynthConfig, SynthError};

#[derive(Debug, Parser)]
#[command(name = "coreg", version, about = "Co-register IVUS and OCT pullbacks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register an IVUS/OCT pair (or a batch of pairs) and write the result JSON
    Register(RegisterArgs),
    /// Write a synthetic IVUS/OCT pair with ground truth
    Simulate(SimulateArgs),
    /// Compare two or three registration results
    Evaluate(EvaluateArgs),
    /// Write the distance, cost and rotation cost matrices as CSV
    DumpMatrices(DumpArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// IVUS feature file (NDJSON)
    #[arg(required_unless_present = "batch")]
    pub ivus: Option<PathBuf>,
    /// OCT feature file (NDJSON)
    #[arg(required_unless_present = "batch")]
    pub oct: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    pub out: Option<PathBuf>,
    /// Fail with exit code 3 when no anchor pair is found
    #[arg(long)]
    pub strict: bool,
    /// JSON list of {"ivus", "oct", "out"} jobs registered concurrently
    #[arg(long, conflicts_with_all = ["ivus", "oct", "out"])]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub dump_d: Option<PathBuf>,
    #[arg(long)]
    pub dump_c: Option<PathBuf>,
    #[arg(long)]
    pub dump_r: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Synthetic vessel description (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model (or first) result
    pub result_a: PathBuf,
    pub result_b: PathBuf,
    /// Second observer; enables the Williams index
    pub result_c: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the bootstrap seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    pub ivus: PathBuf,
    pub oct: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for D.csv, C.csv and R.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pullback(#[from] PullbackError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot read {path}: {reason}")]
    Input { path: String, reason: String },
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: io::Error },
    #[error("degenerate registration: {0}")]
    Degenerate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output { .. } => 1,
            CliError::Degenerate(_) => 3,
            _ => 2,
        }
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    let wrap = |source| CliError::Output {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    body(&mut out).and_then(|_| out.flush()).map_err(wrap)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn write_csv(path: &Path, grid: &Grid) -> Result<(), CliError> {
    write_file(path, |w| grid.write_csv(w))
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig, CliError> {
    Ok(match path {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let input = |reason: String| CliError::Input {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| input(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| input(e.to_string()))
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_ms: f64,
}

/// Timing lives next to the result so that result files stay byte-reproducible.
pub fn timing_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.json");
    out.with_file_name(name)
}

fn register_one(ivus: &Path, oct: &Path, cfg: &EngineConfig) -> Result<Registration, CliError> {
    let ivus = parse_pullback(ivus, Modality::Ivus)?;
    let oct = parse_pullback(oct, Modality::Oct)?;
    Ok(register(&ivus, &oct, cfg)?)
}

fn finish_one(reg: &Registration, out: &Path, strict: bool) -> Result<(), CliError> {
    for w in &reg.result.warnings {
        log::warn!("{}: {w}", out.display());
    }
    if strict && reg.result.is_degenerate() {
        return Err(CliError::Degenerate(reg.result.warnings.join("; ")));
    }
    write_json(out, &reg.result)?;
    write_json(
        &timing_path(out),
        &Timing {
            wall_clock_ms: reg.elapsed_ms,
        },
    )?;
    log::info!("{}: registered in {:.1} ms", out.display(), reg.elapsed_ms);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchJob {
    ivus: PathBuf,
    oct: PathBuf,
    out: PathBuf,
}

pub fn cmd_register(args: &RegisterArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;

    if let Some(manifest) = &args.batch {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let jobs: Vec<BatchJob> = read_json(manifest)?;
        let outcomes: Vec<Result<(), CliError>> = jobs
            .par_iter()
            .map(|job| {
                let reg = register_one(&base.join(&job.ivus), &base.join(&job.oct), &cfg)?;
                finish_one(&reg, &base.join(&job.out), args.strict)
            })
            .collect();
        // report the first failure in manifest order
        return outcomes.into_iter().collect();
    }

    let (Some(ivus), Some(oct), Some(out)) = (&args.ivus, &args.oct, &args.out) else {
        unreachable!("clap enforces ivus, oct and out without --batch");
    };
    let reg = register_one(ivus, oct, &cfg)?;
    for (path, grid) in [(&args.dump_d, &reg.distance), (&args.dump_c, &reg.cost), (&args.dump_r, &reg.rotation_cost)] {
        if let Some(path) = path {
            write_csv(path, grid)?;
        }
    }
    finish_one(&reg, out, args.strict)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (ivus, oct, truth) = generate_pair(&cfg)?;
    write_file(&args.out.join("ivus.ndjson"), |w| write_pullback(&ivus, w))?;
    write_file(&args.out.join("oct.ndjson"), |w| write_pullback(&oct, w))?;
    write_json(&args.out.join("ground_truth.json"), &truth)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.bootstrap_seed = seed;
    }
    let a: RegistrationEstimate = read_json(&args.result_a)?;
    let b: RegistrationEstimate = read_json(&args.result_b)?;
    match &args.result_c {
        None => write_json(&args.out, &metrics::pairwise_agreement(&a, &b)?),
        Some(c) => {
            let c: RegistrationEstimate = read_json(c)?;
            write_json(&args.out, &metrics::agreement_report(&a, &b, &c, &cfg.williams())?)
        }
    }
}

pub fn cmd_dump_matrices(args: &DumpArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let reg = register_one(&args.ivus, &args.oct, &cfg)?;
    write_csv(&args.out.join("D.csv"), &reg.distance)?;
    write_csv(&args.out.join("C.csv"), &reg.cost)?;
    write_csv(&args.out.join("R.csv"), &reg.rotation_cost)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::DumpMatrices(a) => cmd_dump_matrices(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
