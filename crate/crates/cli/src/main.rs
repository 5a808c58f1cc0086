//! `mchammer`: simulate probes, measure leakage, run the covert channel and
//! the single-trace ECDSA attack; `probe` and `victim` drive real hardware.

mod cmd;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mchammer_core::LatencyModel;

#[derive(Debug, Parser)]
#[command(name = "mchammer", version, about = "Machine-clear side-channel lab")]
struct Cli {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory for output files and the run manifest. Without it results
    /// go to stdout only.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Latency model overrides as `key=value` lines.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Simulate(cmd::simulate::Args),
    Nicv(cmd::nicv::Args),
    Covert(cmd::covert::Args),
    Attack(cmd::attack::Args),
    #[cfg(feature = "hw")]
    Probe(cmd::hw::ProbeArgs),
    #[cfg(feature = "hw")]
    Victim(cmd::hw::VictimArgs),
}

/// Settings shared by every subcommand.
pub struct Global {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: LatencyModel,
    pub model_file: Option<PathBuf>,
}

/// Failures with a dedicated exit status; everything else exits 4.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    RecoveryFailed,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "usage: {msg}"),
            Failure::RecoveryFailed => f.write_str("key recovery failed"),
        }
    }
}

impl std::error::Error for Failure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn load_model(path: Option<&PathBuf>) -> anyhow::Result<LatencyModel> {
    let base = LatencyModel::default();
    match path {
        None => Ok(base),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            base.with_overrides(&text)
                .with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let global = Global {
        seed: cli.seed,
        model: load_model(cli.model.as_ref())?,
        model_file: cli.model,
        out: cli.out,
    };
    match cli.command {
        Command::Simulate(a) => cmd::simulate::run(&global, a),
        Command::Nicv(a) => cmd::nicv::run(&global, a),
        Command::Covert(a) => cmd::covert::run(&global, a),
        Command::Attack(a) => cmd::attack::run(&global, a),
        #[cfg(feature = "hw")]
        Command::Probe(a) => cmd::hw::probe(&global, a),
        #[cfg(feature = "hw")]
        Command::Victim(a) => cmd::hw::victim(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => match err.downcast_ref::<Failure>() {
            Some(Failure::RecoveryFailed) => ExitCode::from(3),
            Some(f @ Failure::Usage(_)) => {
                eprintln!("error: {f}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {err:#}");
                ExitCode::from(4)
            }
        },
    }
}
