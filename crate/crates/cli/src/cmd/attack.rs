use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::Context;
use mchammer_core::ecdsa::attack::{format_scalar, signing_context};
use mchammer_core::ecdsa::{
    attack_single_trace, simulate_signing_run, CurveParams, EcError, ATTACK_MESSAGE,
};
use mchammer_core::trace_io::{read_trace, trace_to_string};
use num_bigint::BigUint;
use num_traits::Num;

use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{usage, Failure, Global};

pub const REPORT_FILE: &str = "attack.txt";
pub const DEFAULT_TRACE_FILE: &str = "attack.trace";

/// Single-trace nonce and key recovery from an MC-Hammer trace of one
/// ECDSA signing.
#[derive(Debug, clap::Args)]
pub struct Args {
    /// p256 or toy17.
    #[arg(long, default_value = "p256")]
    curve: String,
    /// Signing nonce, hex with a 0x prefix or decimal. Drawn from the seed
    /// when absent.
    #[arg(long, conflicts_with = "trace_file")]
    nonce: Option<String>,
    /// Attack an existing annotated trace instead of simulating a signing.
    #[arg(long)]
    trace_file: Option<PathBuf>,
    /// Write the simulated trace; a relative path lands under --out.
    #[arg(
        long,
        num_args = 0..=1,
        default_missing_value = DEFAULT_TRACE_FILE,
        conflicts_with = "trace_file"
    )]
    save_trace: Option<PathBuf>,
    /// Disable latency noise.
    #[arg(long, conflicts_with = "trace_file")]
    zero_noise: bool,
}

fn parse_nonce(text: &str) -> anyhow::Result<BigUint> {
    let parsed = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => BigUint::from_str_radix(hex, 16),
        None => BigUint::from_str_radix(text, 10),
    };
    parsed.map_err(|_| usage(format!("bad nonce `{text}`")))
}

pub fn run(global: &Global, args: Args) -> anyhow::Result<()> {
    let mut m = RunManifest::new("attack", global);
    let (curve, trace, sig, public) = match &args.trace_file {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let trace = read_trace(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
            let (curve, sig, public) = signing_context(&trace)?;
            m.param("trace_file", path.display());
            (curve, trace, sig, public)
        }
        None => {
            let curve = CurveParams::by_name(&args.curve).map_err(|e| usage(e.to_string()))?;
            let nonce = args.nonce.as_deref().map(parse_nonce).transpose()?;
            let model = if args.zero_noise {
                global.model.noiseless()
            } else {
                global.model
            };
            let run = simulate_signing_run(&curve, &model, global.seed, nonce.as_ref(), ATTACK_MESSAGE)
                .map_err(|e| match e {
                    EcError::ScalarOutOfRange | EcError::RejectedNonce(_) => usage(format!("nonce: {e}")),
                    e => e.into(),
                })?;
            m.param("curve", &curve.name)
                .param("nonce", format_scalar(&run.nonce, &curve))
                .param("zero_noise", args.zero_noise);
            (curve, run.trace, run.signature, run.keypair.public)
        }
    };

    if let Some(rel) = &args.save_trace {
        let path = match &global.out {
            Some(dir) if rel.is_relative() => {
                ensure_dir(dir)?;
                dir.join(rel)
            }
            _ => rel.clone(),
        };
        write_file(&path, trace_to_string(&trace)?.as_bytes())?;
        m.output(rel.display().to_string());
    }

    let report = attack_single_trace(&trace, &sig, &public, &curve)?;
    let text = report.to_text(&curve);
    print!("{text}");
    if let Some(dir) = &global.out {
        ensure_dir(dir)?;
        write_file(&dir.join(REPORT_FILE), text.as_bytes())?;
        m.output(REPORT_FILE);
        m.write(dir, global)?;
    }
    match report.recovered() {
        Some(_) => Ok(()),
        None => Err(Failure::RecoveryFailed.into()),
    }
}
