//! Argument parsing and dispatch for the `corrector` binary.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a run
//! fails after its inputs were accepted.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use corrector_core::harness::config::{apply_overrides, read_flat_file, to_flat};
use corrector_core::harness::{default_config, execute, rerun, run_report, Command, RunManifest};
use corrector_core::Error;
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "corrector", version, about = "Stale-embedding corrector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate a synthetic drift task
    SynthGen(RunArgs),
    /// Train a corrector on a fixed synthetic task
    TrainCorrector(RunArgs),
    /// Train a dual encoder on the toy retrieval task
    TrainJoint(RunArgs),
    /// Train a retriever and reader on the toy answer task
    TrainRlm(RunArgs),
    /// Corrector size grid over drift levels
    SweepCapacity(RunArgs),
    /// Corrector size by training-fraction grid
    SweepFraction(RunArgs),
    /// Numeric checks of the staleness bounds
    CheckTheory(RunArgs),
    /// Correct a small random encoder toward a large one
    SmallLarge(RunArgs),
    /// Recall of saved encoders (set `run_dir`)
    Eval(RunArgs),
    /// Aggregate finished runs across seeds
    Report(ReportArgs),
    /// Re-execute a run from its manifest and compare results
    Rerun(RerunArgs),
    /// Print a command's default config as flat `key = value` lines
    Defaults(DefaultsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, value_name = "U64", required = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Config override, applied after `--config` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories holding a manifest
    #[arg(required = true, value_name = "RUN_DIR")]
    dirs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = "report")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RerunArgs {
    /// Manifest file or the run directory holding it
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DefaultsArgs {
    /// Subcommand name, e.g. `train-joint`
    command: String,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_) | Error::DigestCollision { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Human-readable output goes to `out`, diagnostics to `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Run(m)) => {
            let _ = writeln!(err, "run failed: {m}");
            2
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let (command, args) = match cli.command {
        Sub::SynthGen(a) => (Command::SynthGen, a),
        Sub::TrainCorrector(a) => (Command::TrainCorrector, a),
        Sub::TrainJoint(a) => (Command::TrainJoint, a),
        Sub::TrainRlm(a) => (Command::TrainRlm, a),
        Sub::SweepCapacity(a) => (Command::SweepCapacity, a),
        Sub::SweepFraction(a) => (Command::SweepFraction, a),
        Sub::CheckTheory(a) => (Command::CheckTheory, a),
        Sub::SmallLarge(a) => (Command::SmallLarge, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::Report(a) => {
            let cells = run_report(&a.dirs, &a.out)?;
            let _ = writeln!(out, "{} cells -> {}", cells.len(), a.out.display());
            return Ok(());
        }
        Sub::Rerun(a) => {
            let before = RunManifest::read(&a.manifest)?;
            let after = rerun(&a.manifest, &a.out)?;
            if !before.same_results(&after) {
                return Err(Failure::Run("re-executed run differs from its manifest".into()));
            }
            let _ = writeln!(out, "reproduced {} metrics bit-exactly", after.metrics.len());
            return Ok(());
        }
        Sub::Defaults(a) => {
            let command: Command = a.command.parse()?;
            let _ = write!(out, "{}", to_flat(&default_config(command)?)?);
            return Ok(());
        }
    };
    let seed = args.seed.ok_or_else(|| Failure::Usage("missing required flag --seed".into()))?;
    let config = resolve_config(command, args.config.as_deref(), &args.set)?;
    let manifest = execute(command, &config, seed, &args.out)?;
    for (k, v) in &manifest.metrics {
        let _ = writeln!(out, "{k} = {v}");
    }
    let _ = writeln!(out, "manifest: {}", args.out.join(corrector_core::harness::MANIFEST_FILE).display());
    Ok(())
}

/// Defaults, then the config file, then `--set` pairs.
pub fn resolve_config(command: Command, file: Option<&Path>, set: &[String]) -> Result<Value, Error> {
    let mut pairs = match file {
        Some(p) => read_flat_file(p)?,
        None => Vec::new(),
    };
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("`--set {s}` is not KEY=VALUE")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    apply_overrides(&default_config(command)?, &pairs)
}
