//! Shared vocabulary: samples, traces, probe configuration and the latency model.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// One probe measurement: the two raw timestamp-counter readings around the
/// timed instruction. Latencies are derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub index: u64,
    pub tsc_start: u64,
    pub tsc_end: u64,
}

impl Sample {
    pub fn new(index: u64, tsc_start: u64, tsc_end: u64) -> Self {
        Self {
            index,
            tsc_start,
            tsc_end,
        }
    }

    pub fn latency(&self) -> u64 {
        latency(self)
    }
}

/// `tsc_end - tsc_start` modulo 2^64, so a counter wrap between the two
/// readings still yields the elapsed cycle count.
pub fn latency(sample: &Sample) -> u64 {
    sample.tsc_end.wrapping_sub(sample.tsc_start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    FlushReload,
    McHammer,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::FlushReload => "flush_reload",
            ProbeKind::McHammer => "mc_hammer",
        }
    }

    /// Metadata tag used for traces produced by the simulator.
    pub fn simulated_tag(&self) -> &'static str {
        match self {
            ProbeKind::FlushReload => "simulated_fr",
            ProbeKind::McHammer => "simulated_mc",
        }
    }

    /// Maps any of the four `probe` metadata tags back to the probe kind.
    pub fn from_meta_tag(tag: &str) -> Option<Self> {
        match tag {
            "flush_reload" | "simulated_fr" => Some(ProbeKind::FlushReload),
            "mc_hammer" | "simulated_mc" => Some(ProbeKind::McHammer),
            _ => None,
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flush_reload" | "fr" => Ok(ProbeKind::FlushReload),
            "mc_hammer" | "mc" => Ok(ProbeKind::McHammer),
            other => Err(ModelError::UnknownProbeKind(other.to_string())),
        }
    }
}

/// Accepted values of the mandatory `probe` metadata key.
pub const PROBE_TAGS: [&str; 4] = ["flush_reload", "mc_hammer", "simulated_fr", "simulated_mc"];

/// Ordered key/value metadata. Insertion order is preserved so that a trace
/// file round-trips byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Meta {
    entries: Vec<(String, String)>,
}

impl Meta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Replaces the value of an existing key in place, or appends it.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub samples: Vec<Sample>,
    pub meta: Meta,
}

impl Trace {
    pub fn new(meta: Meta) -> Self {
        Self {
            samples: Vec::new(),
            meta,
        }
    }

    /// Appends a sample, assigning the next contiguous index.
    pub fn push(&mut self, tsc_start: u64, tsc_end: u64) {
        let index = self.samples.len() as u64;
        self.samples.push(Sample::new(index, tsc_start, tsc_end));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn latencies(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(latency)
    }

    pub fn probe_kind(&self) -> Option<ProbeKind> {
        self.meta.get("probe").and_then(ProbeKind::from_meta_tag)
    }

    /// Checks the structural invariants: contiguous 0-based indices,
    /// non-decreasing start counters and the two mandatory metadata keys.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self.meta.get("probe") {
            Some(tag) if PROBE_TAGS.contains(&tag) => {}
            Some(tag) => return Err(ModelError::UnknownProbeKind(tag.to_string())),
            None => return Err(ModelError::MissingMeta("probe")),
        }
        if self.meta.get("target").is_none() {
            return Err(ModelError::MissingMeta("target"));
        }
        let mut prev_start = 0;
        for (pos, s) in self.samples.iter().enumerate() {
            if s.index != pos as u64 {
                return Err(ModelError::NonContiguousIndex {
                    position: pos,
                    index: s.index,
                });
            }
            if s.tsc_start < prev_start {
                return Err(ModelError::DecreasingTimestamp { index: s.index });
            }
            prev_start = s.tsc_start;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown probe kind `{0}`")]
    UnknownProbeKind(String),
    #[error("trace metadata is missing mandatory key `{0}`")]
    MissingMeta(&'static str),
    #[error("sample at position {position} carries index {index}")]
    NonContiguousIndex { position: usize, index: u64 },
    #[error("tsc_start decreases at sample {index}")]
    DecreasingTimestamp { index: u64 },
    #[error("invalid probe configuration: {0}")]
    InvalidProbeConfig(String),
    #[error("invalid latency model: {0}")]
    InvalidLatencyModel(String),
    #[error("latency model line {line}: {msg}")]
    ModelSyntax { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Flush+Reload waiting period; ignored for MC-Hammer.
    pub wait_cycles: u64,
    /// Flush+Reload reloads faster than this are hits.
    pub hit_threshold: u64,
    pub num_samples: usize,
}

impl ProbeConfig {
    pub const DEFAULT_WAIT_CYCLES: u64 = 1000;
    pub const DEFAULT_HIT_THRESHOLD: u64 = 150;

    pub fn flush_reload(num_samples: usize) -> Self {
        Self {
            kind: ProbeKind::FlushReload,
            wait_cycles: Self::DEFAULT_WAIT_CYCLES,
            hit_threshold: Self::DEFAULT_HIT_THRESHOLD,
            num_samples,
        }
    }

    pub fn mc_hammer(num_samples: usize) -> Self {
        Self {
            kind: ProbeKind::McHammer,
            ..Self::flush_reload(num_samples)
        }
    }

    pub fn validate(&self, model: &LatencyModel) -> Result<(), ModelError> {
        if self.kind == ProbeKind::FlushReload {
            if self.wait_cycles == 0 {
                return Err(ModelError::InvalidProbeConfig(
                    "wait_cycles must be positive for flush_reload".into(),
                ));
            }
            let hit = model.class(LatencyClass::FrHit).median;
            let miss = model.class(LatencyClass::FrMiss).median;
            let cut = self.hit_threshold as f64;
            if !(cut > hit && cut < miss) {
                return Err(ModelError::InvalidProbeConfig(format!(
                    "hit_threshold {cut} must lie strictly between the hit median {hit} and miss median {miss}"
                )));
            }
        }
        Ok(())
    }
}

/// The four timing populations: Flush+Reload reload hits and misses, and
/// MC-Hammer flushes with and without an induced machine clear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatencyClass {
    FrHit,
    FrMiss,
    McActive,
    McInactive,
}

impl LatencyClass {
    pub const ALL: [LatencyClass; 4] = [
        LatencyClass::FrHit,
        LatencyClass::FrMiss,
        LatencyClass::McActive,
        LatencyClass::McInactive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LatencyClass::FrHit => "fr_hit",
            LatencyClass::FrMiss => "fr_miss",
            LatencyClass::McActive => "mc_active",
            LatencyClass::McInactive => "mc_inactive",
        }
    }

    fn slot(&self) -> usize {
        *self as usize
    }
}

impl FromStr for LatencyClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LatencyClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ModelError::InvalidLatencyModel(format!("unknown class `{s}`")))
    }
}

/// Summary statistics of one latency class, in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// Smallest latency the sampler will emit.
    pub floor: f64,
}

impl ClassStats {
    pub const fn new(mean: f64, std: f64, median: f64, floor: f64) -> Self {
        Self {
            mean,
            std,
            median,
            floor,
        }
    }
}

pub const DEFAULT_FLOOR: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    classes: [ClassStats; 4],
}

/// The measured Kaby Lake timing statistics for the four populations.
pub fn default_latency_model() -> LatencyModel {
    LatencyModel {
        classes: [
            ClassStats::new(82.14, 30.48, 78.0, DEFAULT_FLOOR),
            ClassStats::new(250.80, 92.12, 228.0, DEFAULT_FLOOR),
            ClassStats::new(311.35, 120.67, 306.0, DEFAULT_FLOOR),
            ClassStats::new(149.63, 7.48, 149.0, DEFAULT_FLOOR),
        ],
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        default_latency_model()
    }
}

impl LatencyModel {
    pub fn from_classes(
        fr_hit: ClassStats,
        fr_miss: ClassStats,
        mc_active: ClassStats,
        mc_inactive: ClassStats,
    ) -> Result<Self, ModelError> {
        let model = Self {
            classes: [fr_hit, fr_miss, mc_active, mc_inactive],
        };
        model.validate()?;
        Ok(model)
    }

    pub fn class(&self, class: LatencyClass) -> &ClassStats {
        &self.classes[class.slot()]
    }

    pub fn class_mut(&mut self, class: LatencyClass) -> &mut ClassStats {
        &mut self.classes[class.slot()]
    }

    /// Zero-noise variant: every class collapses onto its median.
    pub fn noiseless(&self) -> Self {
        let mut out = *self;
        for c in out.classes.iter_mut() {
            c.mean = c.median;
            c.std = 0.0;
        }
        out
    }

    pub fn is_noiseless(&self) -> bool {
        self.classes.iter().all(|c| c.std == 0.0)
    }

    /// Cut between inactive and active MC-Hammer flushes: the midpoint of
    /// the two medians (228 cycles for the default model).
    pub fn mc_cut(&self) -> f64 {
        let lo = self.class(LatencyClass::McInactive).median;
        let hi = self.class(LatencyClass::McActive).median;
        (lo + hi) / 2.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for class in LatencyClass::ALL {
            let c = self.class(class);
            let name = class.as_str();
            if !(c.mean.is_finite() && c.std.is_finite() && c.median.is_finite()) {
                return Err(ModelError::InvalidLatencyModel(format!(
                    "{name}: non-finite statistic"
                )));
            }
            if c.std < 0.0 {
                return Err(ModelError::InvalidLatencyModel(format!(
                    "{name}: negative std"
                )));
            }
            if !(c.mean >= c.median && c.median >= c.floor && c.floor > 0.0) {
                return Err(ModelError::InvalidLatencyModel(format!(
                    "{name}: expected mean >= median >= floor > 0, got {} / {} / {}",
                    c.mean, c.median, c.floor
                )));
            }
        }
        Ok(())
    }

    /// Parses `class.field=value` overrides (one per line, `#` comments)
    /// applied on top of `self`.
    pub fn with_overrides(&self, text: &str) -> Result<Self, ModelError> {
        let mut out = *self;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |msg: String| ModelError::ModelSyntax { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected class.field=value".into()))?;
            let (class, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| syntax(format!("key `{key}` is not class.field")))?;
            let class: LatencyClass = class.parse().map_err(|e: ModelError| syntax(e.to_string()))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| syntax(format!("`{}` is not a number", value.trim())))?;
            let stats = out.class_mut(class);
            match field {
                "mean" => stats.mean = value,
                "std" => stats.std = value,
                "median" => stats.median = value,
                "floor" => stats.floor = value,
                other => return Err(syntax(format!("unknown field `{other}`"))),
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Inverse of [`LatencyModel::with_overrides`]: every field, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for class in LatencyClass::ALL {
            let c = self.class(class);
            let name = class.as_str();
            out.push_str(&format!("{name}.mean={}\n", c.mean));
            out.push_str(&format!("{name}.std={}\n", c.std));
            out.push_str(&format!("{name}.median={}\n", c.median));
            out.push_str(&format!("{name}.floor={}\n", c.floor));
        }
        out
    }
}
