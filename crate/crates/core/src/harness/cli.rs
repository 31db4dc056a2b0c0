//! `metalab <mode> --config f.json --out f.csv [--seed N]`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 audit violation or
//! failed gradient check.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use tempfile::NamedTempFile;

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Mode};
use crate::harness::experiments::run_experiment;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metalab", about = "Exact-oracle meta-RL and meta-SL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-RL gradient ascent; one row per iterate.
    TrainRl(RunArgs),
    /// Meta-SL gradient descent; one row per iterate.
    TrainSl(RunArgs),
    /// Meta-RL optimality-gap audit; one row per seed.
    AuditRl(RunArgs),
    /// Meta-SL optimality-gap audits; one row per seed and audit.
    AuditSl(RunArgs),
    /// Network linearization error across widths.
    NnLinerr(RunArgs),
    /// Analytic meta-gradients against finite differences.
    Gradcheck(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output CSV, written atomically.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (Mode, RunArgs) {
        match self {
            Command::TrainRl(a) => (Mode::TrainRl, a),
            Command::TrainSl(a) => (Mode::TrainSl, a),
            Command::AuditRl(a) => (Mode::AuditRl, a),
            Command::AuditSl(a) => (Mode::AuditSl, a),
            Command::NnLinerr(a) => (Mode::NnLinerr, a),
            Command::Gradcheck(a) => (Mode::Gradcheck, a),
        }
    }
}

/// Replaces `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn usage() -> String {
    Cli::command().render_usage().to_string()
}

/// Parses `argv` (program name first), runs the experiment and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let (mode, args) = cli.command.split();
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}\n{}", args.config.display(), usage());
            return EXIT_INVALID;
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let output = match run_experiment(mode, &config, base_dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {}: {e}", mode.name());
            return EXIT_INVALID;
        }
    };
    if let Err(e) = write_atomically(&args.out, &output.csv) {
        eprintln!("error: cannot write {}: {e}", args.out.display());
        return EXIT_INVALID;
    }
    println!("{}", output.summary);
    if output.violation {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    }
}
