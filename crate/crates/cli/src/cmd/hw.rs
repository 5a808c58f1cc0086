use std::path::PathBuf;

use anyhow::Context;
use mchammer_core::model::{ProbeConfig, ProbeKind};
use mchammer_core::trace_io::trace_to_string;
use mchammer_core::Region;
use mchammer_hwprobe::{
    flush_reload_capture, mc_hammer_capture, run_victim, self_test, victim_target, HwTarget, Ordering,
};

use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{usage, Global};

pub const PROBE_FILE: &str = "probe.trace";

/// Capture a trace from a cache line of a file on this machine.
#[derive(Debug, clap::Args)]
pub struct ProbeArgs {
    /// File whose code page is probed, e.g. the path printed by
    /// `mchammer victim --print-target`.
    #[arg(long, required_unless_present = "self_test")]
    target: Option<PathBuf>,
    /// Byte offset into the file, hex.
    #[arg(long, default_value = "0")]
    offset: String,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Use Flush+Reload with this waiting period instead of MC-Hammer.
    #[arg(long)]
    wait: Option<u64>,
    /// MC-Hammer: order the flush with a load fence instead of the
    /// address dependency.
    #[arg(long)]
    lfence: bool,
    /// Probe the built-in victim with both techniques and compare medians.
    #[arg(long)]
    self_test: bool,
}

/// Run the victim fixture compiled into this binary.
#[derive(Debug, clap::Args)]
pub struct VictimArgs {
    /// victim_0 or victim_1.
    #[arg(long, default_value = "victim_0")]
    region: String,
    /// Loop iterations per round.
    #[arg(long, default_value_t = 1 << 20)]
    iterations: u64,
    /// Rounds to run; 0 runs until killed.
    #[arg(long, default_value_t = 1)]
    rounds: u64,
    /// Print the probe target (file and hex offset) and exit.
    #[arg(long)]
    print_target: bool,
}

fn parse_hex(text: &str) -> anyhow::Result<u64> {
    let digits = text.trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(digits, 16).map_err(|_| usage(format!("bad hex offset `{text}`")))
}

pub fn probe(global: &Global, args: ProbeArgs) -> anyhow::Result<()> {
    if args.self_test {
        let report = self_test(args.samples).context("self-test")?;
        print!("{}", report.to_text());
        println!();
        return Ok(());
    }
    let path = args.target.clone().expect("clap enforces --target");
    let target = HwTarget::new(path, parse_hex(&args.offset)?);
    let mapped = target.map()?;
    let trace = match args.wait {
        Some(wait) => {
            let mut cfg = ProbeConfig::flush_reload(args.samples);
            cfg.wait_cycles = wait;
            cfg.validate(&global.model).map_err(|e| usage(e.to_string()))?;
            flush_reload_capture(&mapped, &cfg)?
        }
        None => {
            let ordering = if args.lfence { Ordering::Lfence } else { Ordering::Dependency };
            mc_hammer_capture(&mapped, args.samples, ordering)?
        }
    };
    let text = trace_to_string(&trace)?;
    match &global.out {
        None => print!("{text}"),
        Some(dir) => {
            ensure_dir(dir)?;
            write_file(&dir.join(PROBE_FILE), text.as_bytes())?;
            let mut m = RunManifest::new("probe", global);
            let kind = if args.wait.is_some() { ProbeKind::FlushReload } else { ProbeKind::McHammer };
            m.param("target", target.path.display())
                .param("offset", format!("{:#x}", target.offset))
                .param("samples", args.samples)
                .param("probe", kind)
                .output(PROBE_FILE);
            if let Some(w) = args.wait {
                m.param("wait", w);
            }
            m.write(dir, global)?;
            eprintln!("hardware traces are not reproducible; the manifest records the capture settings only");
        }
    }
    Ok(())
}

pub fn victim(args: VictimArgs) -> anyhow::Result<()> {
    if args.print_target {
        let t = victim_target()?;
        println!("{} {:#x}", t.path.display(), t.offset);
        return Ok(());
    }
    let region: Region = args.region.parse().map_err(|e| usage(format!("{e}")))?;
    if args.iterations == 0 {
        return Err(usage("--iterations must be positive"));
    }
    let mut round = 0;
    while args.rounds == 0 || round < args.rounds {
        run_victim(region, args.iterations)?;
        round += 1;
    }
    Ok(())
}
