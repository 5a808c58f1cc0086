//! Discrete-event simulation of a victim loop and an attacker probe sharing
//! one cycle clock.
//!
//! The victim executes a sequence of loop iterations, each inside one of two
//! code regions. The probe targets one cache line of one region. Flushing
//! that line makes the next victim iteration in the region miss; under
//! MC-Hammer a flush landing while the victim executes the region also
//! triggers a self-modifying-code machine clear, stalling the victim.
//! Flush+Reload samples report a hit when the victim fetched the line during
//! the waiting period; MC-Hammer samples report a slow flush when the victim
//! was inside the region at the moment of the flush.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::latency::{LatencySampler, LatencyShape};
use crate::model::{LatencyClass, LatencyModel, Meta, ModelError, ProbeConfig, ProbeKind, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Victim0,
    Victim1,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Victim0 => "victim_0",
            Region::Victim1 => "victim_1",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "victim_0" | "0" => Ok(Region::Victim0),
            "victim_1" | "1" => Ok(Region::Victim1),
            other => Err(SimError::UnknownRegion(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub region: Region,
    pub iterations: u64,
}

impl Segment {
    pub fn new(region: Region, iterations: u64) -> Self {
        Self { region, iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimProgram {
    pub segments: Vec<Segment>,
    pub iter_base_cost: u64,
    pub miss_penalty: u64,
    pub clear_penalty: u64,
    /// When set, segment `k` starts no earlier than `k * slot_cycles` after
    /// the victim's first iteration; the victim idles outside both regions
    /// until then.
    pub slot_cycles: Option<u64>,
}

impl VictimProgram {
    pub const DEFAULT_ITER_BASE_COST: u64 = 100;
    pub const DEFAULT_MISS_PENALTY: u64 = 100;
    pub const DEFAULT_CLEAR_PENALTY: u64 = 270;
    /// Loop iterations per function call in the granularity experiments.
    pub const REFERENCE_ITERATIONS: u64 = 1 << 10;

    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            segments,
            iter_base_cost: Self::DEFAULT_ITER_BASE_COST,
            miss_penalty: Self::DEFAULT_MISS_PENALTY,
            clear_penalty: Self::DEFAULT_CLEAR_PENALTY,
            slot_cycles: None,
        }
    }

    /// `victim_0` for 2^10 iterations followed by `second` for 2^10.
    pub fn reference(second: Region) -> Self {
        Self::new(vec![
            Segment::new(Region::Victim0, Self::REFERENCE_ITERATIONS),
            Segment::new(second, Self::REFERENCE_ITERATIONS),
        ])
    }

    pub fn total_iterations(&self) -> u64 {
        self.segments.iter().map(|s| s.iterations).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.segments.is_empty() {
            return Err(SimError::EmptyProgram);
        }
        if let Some(pos) = self.segments.iter().position(|s| s.iterations == 0) {
            return Err(SimError::ZeroIterations { segment: pos });
        }
        if self.iter_base_cost == 0 || self.miss_penalty == 0 || self.clear_penalty == 0 {
            return Err(SimError::NonPositiveCost);
        }
        if self.slot_cycles == Some(0) {
            return Err(SimError::NonPositiveCost);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub latency_model: LatencyModel,
    pub latency_shape: LatencyShape,
    pub probe: ProbeConfig,
    pub probe_target: Region,
    /// Fences and bookkeeping between two probe samples.
    pub probe_overhead: u64,
    pub rng_seed: u64,
    pub repetitions: usize,
    /// The victim's first iteration starts uniformly within `[0, start_jitter)`
    /// cycles after the probe's first sample.
    pub start_jitter: u64,
}

impl SimConfig {
    pub const DEFAULT_PROBE_OVERHEAD: u64 = 60;
    pub const DEFAULT_START_JITTER: u64 = 1000;
    /// Trace length of the granularity experiments.
    pub const REFERENCE_SAMPLES: usize = 1 << 14;

    pub fn new(probe: ProbeConfig, rng_seed: u64) -> Self {
        Self {
            latency_model: LatencyModel::default(),
            latency_shape: LatencyShape::default(),
            probe,
            probe_target: Region::Victim0,
            probe_overhead: Self::DEFAULT_PROBE_OVERHEAD,
            rng_seed,
            repetitions: 1,
            start_jitter: Self::DEFAULT_START_JITTER,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.latency_model.validate()?;
        self.probe.validate(&self.latency_model)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experienced {
    None,
    Miss,
    MachineClear,
}

impl Experienced {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experienced::None => "none",
            Experienced::Miss => "miss",
            Experienced::MachineClear => "machine_clear",
        }
    }
}

/// Ground truth for one victim iteration. `cycle` is when it started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VictimEvent {
    pub cycle: u64,
    pub region: Region,
    pub iteration: u64,
    pub experienced: Experienced,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VictimSchedule {
    pub events: Vec<VictimEvent>,
    /// Cycle at which the last iteration finished.
    pub end_cycle: u64,
}

impl VictimSchedule {
    pub fn count(&self, experienced: Experienced) -> usize {
        self.events
            .iter()
            .filter(|e| e.experienced == experienced)
            .count()
    }

    /// `[start, end)` of iteration `i`.
    pub fn interval(&self, i: usize) -> (u64, u64) {
        let end = self
            .events
            .get(i + 1)
            .map(|e| e.cycle)
            .unwrap_or(self.end_cycle);
        (self.events[i].cycle, end)
    }

    /// Debug export: `cycle,region,iteration,experienced`.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> io::Result<()> {
        writeln!(sink, "cycle,region,iteration,experienced")?;
        for e in &self.events {
            writeln!(
                sink,
                "{},{},{},{}",
                e.cycle,
                e.region,
                e.iteration,
                e.experienced.as_str()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("victim program has no segments")]
    EmptyProgram,
    #[error("segment {segment} has zero iterations")]
    ZeroIterations { segment: usize },
    #[error("victim costs must be positive")]
    NonPositiveCost,
    #[error("unknown region `{0}`, expected victim_0 or victim_1")]
    UnknownRegion(String),
    #[error("cannot average an empty list of traces")]
    NoTraces,
    #[error("averaged csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy)]
struct Running {
    region: Region,
    iteration: u64,
    start: u64,
    end: u64,
    missed: bool,
    cleared: bool,
}

#[derive(Debug, Clone, Copy)]
enum VictimState {
    Waiting { at: u64 },
    Running(Running),
    Done,
}

#[derive(Debug, Clone, Copy)]
enum ProbePhase {
    /// Next action: the timed operation (MC-Hammer flush or FR flush).
    Flush,
    /// Flush+Reload only: the timed reload after the waiting period.
    Reload,
}

struct Engine<'a> {
    program: &'a VictimProgram,
    config: &'a SimConfig,
    sampler: LatencySampler,
    rng: ChaCha8Rng,
    // victim cursor
    segment: usize,
    in_segment: u64,
    iteration: u64,
    origin: u64,
    state: VictimState,
    // shared line state
    line_flushed: bool,
    executed_since_flush: bool,
    inflight_end: u64,
    // probe
    probe_at: u64,
    phase: ProbePhase,
    trace: Trace,
    schedule: VictimSchedule,
}

impl<'a> Engine<'a> {
    fn new(program: &'a VictimProgram, config: &'a SimConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(stream);
        let origin = if config.start_jitter > 0 {
            use rand::Rng;
            rng.gen_range(0..config.start_jitter)
        } else {
            0
        };
        let kind = config.probe.kind;
        let mut meta = Meta::new()
            .with("probe", kind.simulated_tag())
            .with("target", config.probe_target)
            .with("seed", config.rng_seed)
            .with("stream", stream);
        if kind == ProbeKind::FlushReload {
            meta.set("wait", config.probe.wait_cycles);
        }
        meta.set("host", "simulator");
        Self {
            program,
            config,
            sampler: LatencySampler::with_shape(&config.latency_model, config.latency_shape),
            rng,
            segment: 0,
            in_segment: 0,
            iteration: 0,
            origin,
            state: VictimState::Waiting { at: origin },
            // nothing is cached before the first fetch
            line_flushed: true,
            executed_since_flush: false,
            inflight_end: 0,
            probe_at: 0,
            phase: ProbePhase::Flush,
            trace: Trace::new(meta),
            schedule: VictimSchedule::default(),
        }
    }

    fn run(mut self) -> (Trace, VictimSchedule) {
        loop {
            let victim_at = match self.state {
                VictimState::Waiting { at } => at,
                VictimState::Running(r) => r.end,
                VictimState::Done => u64::MAX,
            };
            if matches!(self.state, VictimState::Done)
                && self.trace.len() >= self.config.probe.num_samples
                && matches!(self.phase, ProbePhase::Flush)
            {
                break;
            }
            if self.probe_at <= victim_at {
                self.probe_step();
            } else {
                self.victim_step();
            }
        }
        (self.trace, self.schedule)
    }

    fn target(&self) -> Region {
        self.config.probe_target
    }

    fn probe_step(&mut self) {
        let now = self.probe_at;
        let kind = self.config.probe.kind;
        match (kind, self.phase) {
            (ProbeKind::McHammer, _) => {
                let target = self.target();
                let active = match &mut self.state {
                    VictimState::Running(r) if r.region == target => {
                        if !r.cleared {
                            r.cleared = true;
                            r.end += self.program.clear_penalty;
                        }
                        true
                    }
                    _ => false,
                };
                self.line_flushed = true;
                let class = if active {
                    LatencyClass::McActive
                } else {
                    LatencyClass::McInactive
                };
                let lat = self.sampler.sample(class, &mut self.rng);
                self.trace.push(now, now + lat);
                self.inflight_end = now + lat;
                self.probe_at = now + lat + self.config.probe_overhead;
            }
            (ProbeKind::FlushReload, ProbePhase::Flush) => {
                self.line_flushed = true;
                self.executed_since_flush = false;
                self.probe_at = now + self.config.probe.wait_cycles;
                self.phase = ProbePhase::Reload;
            }
            (ProbeKind::FlushReload, ProbePhase::Reload) => {
                let class = if self.executed_since_flush {
                    LatencyClass::FrHit
                } else {
                    LatencyClass::FrMiss
                };
                // the reload brings the line back into the cache
                self.line_flushed = false;
                let lat = self.sampler.sample(class, &mut self.rng);
                self.trace.push(now, now + lat);
                self.probe_at = now + lat + self.config.probe_overhead;
                self.phase = ProbePhase::Flush;
            }
        }
    }

    fn victim_step(&mut self) {
        match self.state {
            VictimState::Waiting { at } => self.begin_iteration(at),
            VictimState::Running(r) => {
                self.schedule.events.push(VictimEvent {
                    cycle: r.start,
                    region: r.region,
                    iteration: r.iteration,
                    experienced: if r.cleared {
                        Experienced::MachineClear
                    } else if r.missed {
                        Experienced::Miss
                    } else {
                        Experienced::None
                    },
                });
                self.schedule.end_cycle = r.end;
                self.iteration += 1;
                self.in_segment += 1;
                let mut next_at = r.end;
                if self.in_segment == self.program.segments[self.segment].iterations {
                    self.segment += 1;
                    self.in_segment = 0;
                    if self.segment == self.program.segments.len() {
                        self.state = VictimState::Done;
                        return;
                    }
                    if let Some(slot) = self.program.slot_cycles {
                        next_at = next_at.max(self.origin + slot * self.segment as u64);
                    }
                }
                if next_at == r.end {
                    self.begin_iteration(next_at);
                } else {
                    self.state = VictimState::Waiting { at: next_at };
                }
            }
            VictimState::Done => unreachable!("no victim events after completion"),
        }
    }

    fn begin_iteration(&mut self, at: u64) {
        let region = self.program.segments[self.segment].region;
        let mut cost = self.program.iter_base_cost;
        let mut missed = false;
        let mut cleared = false;
        if region == self.target() {
            if self.line_flushed {
                cost += self.program.miss_penalty;
                missed = true;
                self.line_flushed = false;
            }
            self.executed_since_flush = true;
            // fetching the line while an MC-Hammer flush of it is in flight
            if self.config.probe.kind == ProbeKind::McHammer && at < self.inflight_end {
                cost += self.program.clear_penalty;
                cleared = true;
            }
        }
        self.state = VictimState::Running(Running {
            region,
            iteration: self.iteration,
            start: at,
            end: at + cost,
            missed,
            cleared,
        });
    }
}

/// Runs one repetition (stream 0 of `config.rng_seed`).
pub fn simulate(
    victim: &VictimProgram,
    config: &SimConfig,
) -> Result<(Trace, VictimSchedule), SimError> {
    simulate_stream(victim, config, 0)
}

/// Runs repetition `stream`; every repetition draws from its own ChaCha
/// stream of the master seed, so batches are order independent.
pub fn simulate_stream(
    victim: &VictimProgram,
    config: &SimConfig,
    stream: u64,
) -> Result<(Trace, VictimSchedule), SimError> {
    victim.validate()?;
    config.validate()?;
    Ok(Engine::new(victim, config, stream).run())
}

/// All `config.repetitions` runs, in repetition order.
pub fn simulate_batch(
    victim: &VictimProgram,
    config: &SimConfig,
) -> Result<Vec<(Trace, VictimSchedule)>, SimError> {
    victim.validate()?;
    config.validate()?;
    Ok((0..config.repetitions as u64)
        .into_par_iter()
        .map(|stream| Engine::new(victim, config, stream).run())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedTrace {
    pub values: Vec<f64>,
    pub meta: Meta,
}

/// Streaming position-wise mean of trace latencies, truncating to the
/// shortest trace seen.
#[derive(Debug, Clone, Default)]
pub struct TraceAverager {
    sums: Vec<u128>,
    count: usize,
    longest: usize,
}

impl TraceAverager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, trace: &Trace) {
        if self.count == 0 {
            self.sums = trace.latencies().map(u128::from).collect();
        } else {
            self.sums.truncate(trace.len());
            for (acc, lat) in self.sums.iter_mut().zip(trace.latencies()) {
                *acc += u128::from(lat);
            }
        }
        self.longest = self.longest.max(trace.len());
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<AveragedTrace, SimError> {
        if self.count == 0 {
            return Err(SimError::NoTraces);
        }
        let n = self.count as f64;
        let values: Vec<f64> = self.sums.iter().map(|&s| s as f64 / n).collect();
        let mut meta = Meta::new().with("traces", self.count);
        if values.len() < self.longest {
            meta.set("truncated_from", self.longest);
        }
        meta.set("length", values.len());
        Ok(AveragedTrace { values, meta })
    }
}

pub fn average_traces(traces: &[Trace]) -> Result<AveragedTrace, SimError> {
    let mut avg = TraceAverager::new();
    for t in traces {
        avg.add(t);
    }
    avg.finish()
}

/// `index,mean_latency` with a header row.
pub fn write_averaged_csv<W: Write>(values: &[f64], mut sink: W) -> io::Result<()> {
    writeln!(sink, "index,mean_latency")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(sink, "{i},{v}")?;
    }
    Ok(())
}

pub fn read_averaged_csv<R: BufRead>(source: R) -> Result<Vec<f64>, SimError> {
    let csv = |line: usize, msg: String| SimError::Csv { line, msg };
    let mut values = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| csv(line_no, e.to_string()))?;
        if n == 0 {
            if line != "index,mean_latency" {
                return Err(csv(1, format!("unexpected header `{line}`")));
            }
            continue;
        }
        let (idx, v) = line
            .split_once(',')
            .ok_or_else(|| csv(line_no, "expected 2 fields".into()))?;
        if idx.parse::<usize>().ok() != Some(values.len()) {
            return Err(csv(line_no, format!("bad index `{idx}`")));
        }
        values.push(v.parse().map_err(|_| csv(line_no, format!("bad number `{v}`")))?);
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Active,
    Inactive,
}

/// MC-Hammer: slow flush means the victim ran the line. Flush+Reload: fast
/// reload means the victim fetched the line during the wait.
pub fn classify_sample(
    latency: f64,
    kind: ProbeKind,
    model: &LatencyModel,
    hit_threshold: u64,
) -> Activity {
    let active = match kind {
        ProbeKind::McHammer => latency > model.mc_cut(),
        ProbeKind::FlushReload => latency < hit_threshold as f64,
    };
    if active {
        Activity::Active
    } else {
        Activity::Inactive
    }
}

/// Number of positions of an averaged trace that classify as active.
pub fn active_span(values: &[f64], kind: ProbeKind, model: &LatencyModel, hit_threshold: u64) -> usize {
    values
        .iter()
        .filter(|&&v| classify_sample(v, kind, model, hit_threshold) == Activity::Active)
        .count()
}

/// The four granularity experiments: probe kind crossed with the victim
/// calling `victim_0` then `victim_0` (0/0) or `victim_0` then `victim_1` (0/1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Fr00,
    Fr01,
    Mc00,
    Mc01,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Fr00, Scenario::Fr01, Scenario::Mc00, Scenario::Mc01];

    pub fn kind(&self) -> ProbeKind {
        match self {
            Scenario::Fr00 | Scenario::Fr01 => ProbeKind::FlushReload,
            Scenario::Mc00 | Scenario::Mc01 => ProbeKind::McHammer,
        }
    }

    pub fn second_region(&self) -> Region {
        match self {
            Scenario::Fr00 | Scenario::Mc00 => Region::Victim0,
            Scenario::Fr01 | Scenario::Mc01 => Region::Victim1,
        }
    }

    pub fn program(&self) -> VictimProgram {
        VictimProgram::reference(self.second_region())
    }

    pub fn config(&self, seed: u64, repetitions: usize) -> SimConfig {
        let probe = match self.kind() {
            ProbeKind::FlushReload => ProbeConfig::flush_reload(SimConfig::REFERENCE_SAMPLES),
            ProbeKind::McHammer => ProbeConfig::mc_hammer(SimConfig::REFERENCE_SAMPLES),
        };
        let mut config = SimConfig::new(probe, seed);
        config.repetitions = repetitions;
        config
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Fr00 => "fr-00",
            Scenario::Fr01 => "fr-01",
            Scenario::Mc00 => "mc-00",
            Scenario::Mc01 => "mc-01",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}
