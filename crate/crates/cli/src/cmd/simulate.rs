use std::fs::File;
use std::io::BufWriter;

use anyhow::Context;
use mchammer_core::model::{ProbeConfig, ProbeKind};
use mchammer_core::simulator::{
    active_span, simulate_stream, write_averaged_csv, Segment, TraceAverager,
};
use mchammer_core::trace_io::write_trace;
use mchammer_core::{Region, Scenario, SimConfig, VictimProgram};

use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{usage, Global};

pub const AVERAGED_FILE: &str = "averaged.csv";
pub const TRACE_DIR: &str = "traces";

/// Run a probe against the simulated victim and average the traces.
#[derive(Debug, clap::Args)]
pub struct Args {
    /// fr-00, fr-01, mc-00, mc-01 or custom.
    #[arg(long, default_value = "mc-00")]
    scenario: String,
    #[arg(long, default_value_t = 1000)]
    repetitions: usize,
    /// Also write every repetition to `traces/rep_NNNN.trace`.
    #[arg(long)]
    save_traces: bool,
    /// custom only: `mc` or `fr`.
    #[arg(long, default_value = "mc")]
    probe: String,
    /// custom only: comma-separated `region:iterations` list.
    #[arg(long, default_value = "victim_0:1024,victim_1:1024")]
    segments: String,
    /// custom only: minimum samples per trace.
    #[arg(long, default_value_t = SimConfig::REFERENCE_SAMPLES)]
    samples: usize,
    /// custom only: Flush+Reload waiting period in cycles.
    #[arg(long, default_value_t = ProbeConfig::DEFAULT_WAIT_CYCLES)]
    wait: u64,
}

fn parse_segments(text: &str) -> anyhow::Result<Vec<Segment>> {
    text.split(',')
        .map(|part| {
            let (region, iters) = part
                .split_once(':')
                .ok_or_else(|| usage(format!("segment `{part}` is not region:iterations")))?;
            let region: Region = region.trim().parse().map_err(|e| usage(format!("{e}")))?;
            let iters: u64 = iters
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad iteration count `{iters}`")))?;
            Ok(Segment::new(region, iters))
        })
        .collect()
}

fn setup(args: &Args, global: &Global) -> anyhow::Result<(VictimProgram, SimConfig)> {
    let (program, mut config) = if args.scenario == "custom" {
        let kind: ProbeKind = args.probe.parse().map_err(|e| usage(format!("{e}")))?;
        let mut probe = match kind {
            ProbeKind::FlushReload => ProbeConfig::flush_reload(args.samples),
            ProbeKind::McHammer => ProbeConfig::mc_hammer(args.samples),
        };
        probe.wait_cycles = args.wait;
        let program = VictimProgram::new(parse_segments(&args.segments)?);
        (program, SimConfig::new(probe, global.seed))
    } else {
        let sc: Scenario = args.scenario.parse().map_err(usage)?;
        (sc.program(), sc.config(global.seed, args.repetitions))
    };
    config.latency_model = global.model;
    config.repetitions = args.repetitions;
    program.validate().map_err(|e| usage(e.to_string()))?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok((program, config))
}

pub fn run(global: &Global, args: Args) -> anyhow::Result<()> {
    if args.repetitions == 0 {
        return Err(usage("--repetitions must be positive"));
    }
    let (program, config) = setup(&args, global)?;
    if let Some(dir) = &global.out {
        ensure_dir(dir)?;
        if args.save_traces {
            ensure_dir(&dir.join(TRACE_DIR))?;
        }
    }
    let mut avg = TraceAverager::new();
    for rep in 0..args.repetitions {
        let (trace, _) = simulate_stream(&program, &config, rep as u64)?;
        if let (Some(dir), true) = (&global.out, args.save_traces) {
            let path = dir.join(TRACE_DIR).join(format!("rep_{rep:04}.trace"));
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_trace(&trace, BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
        }
        avg.add(&trace);
    }
    let averaged = avg.finish()?;
    let span = active_span(
        &averaged.values,
        config.probe.kind,
        &config.latency_model,
        config.probe.hit_threshold,
    );
    println!("scenario: {}", args.scenario);
    println!("probe: {}", config.probe.kind);
    println!("repetitions: {}", args.repetitions);
    println!("averaged_length: {}", averaged.values.len());
    println!("active_span: {span}");

    if let Some(dir) = &global.out {
        let mut csv = Vec::new();
        write_averaged_csv(&averaged.values, &mut csv)?;
        write_file(&dir.join(AVERAGED_FILE), &csv)?;
        let mut m = RunManifest::new("simulate", global);
        m.param("scenario", &args.scenario)
            .param("repetitions", args.repetitions)
            .param("probe", config.probe.kind)
            .param("samples", config.probe.num_samples)
            .param("wait", config.probe.wait_cycles)
            .param("save_traces", args.save_traces)
            .param("active_span", span)
            .output(AVERAGED_FILE);
        if args.scenario == "custom" {
            m.param("segments", &args.segments);
        }
        if args.save_traces {
            m.output(format!("{TRACE_DIR}/rep_NNNN.trace x{}", args.repetitions));
        }
        m.write(dir, global)?;
    }
    Ok(())
}
