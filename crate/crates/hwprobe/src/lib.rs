//! Hardware MC-Hammer and Flush+Reload probes for x86-64, plus the two-region
//! victim loop they are validated against.
//!
//! The probed line comes from a read-only shared file mapping, so any
//! process executing the same file page shares the physical line. Results
//! depend on the machine: pin attacker and victim to different physical
//! cores, disable frequency scaling, and expect nothing useful from a VM.

use std::fs::File;
use std::path::PathBuf;

use memmap2::Mmap;
use mchammer_core::model::{Meta, ProbeConfig, ProbeKind, Trace};
use mchammer_core::simulator::Region;
use thiserror::Error;

#[cfg(target_arch = "x86_64")]
mod x86;

pub const LINE: u64 = 64;
/// Offset of the probed line inside `victim_0`, as in the reference setup.
pub const VICTIM_PROBE_OFFSET: u64 = 128;

#[derive(Debug, Error)]
pub enum HwError {
    #[error("hardware probes need x86-64")]
    UnsupportedArchitecture,
    #[error("cannot map {path}: {source}")]
    Map {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("offset {offset:#x} lies outside the {len}-byte image")]
    OffsetOutOfRange { offset: u64, len: u64 },
    #[error("probe config: {0}")]
    Config(String),
    #[error("cannot locate the victim fixture in the running image: {0}")]
    Locate(String),
}

/// A cache line of a file, identified by path and byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HwTarget {
    pub path: PathBuf,
    /// Rounded down to a 64-byte boundary on construction.
    pub offset: u64,
}

impl HwTarget {
    pub fn new(path: impl Into<PathBuf>, offset: u64) -> Self {
        Self {
            path: path.into(),
            offset: offset & !(LINE - 1),
        }
    }

    pub fn map(&self) -> Result<MappedTarget, HwError> {
        let map_err = |source| HwError::Map {
            path: self.path.clone(),
            source,
        };
        let file = File::open(&self.path).map_err(map_err)?;
        // SAFETY: the mapping is read-only; a concurrent writer to the file
        // could change bytes under us, which only affects timing here.
        let mmap = unsafe { Mmap::map(&file) }.map_err(map_err)?;
        if self.offset >= mmap.len() as u64 {
            return Err(HwError::OffsetOutOfRange {
                offset: self.offset,
                len: mmap.len() as u64,
            });
        }
        Ok(MappedTarget {
            target: self.clone(),
            mmap,
        })
    }
}

/// A live read-only shared mapping of a [`HwTarget`].
#[derive(Debug)]
pub struct MappedTarget {
    pub target: HwTarget,
    mmap: Mmap,
}

impl MappedTarget {
    pub fn line(&self) -> *const u8 {
        // offset < len is checked in `HwTarget::map`
        self.mmap[self.target.offset as usize..].as_ptr()
    }

    fn meta(&self, kind: ProbeKind) -> Meta {
        Meta::new()
            .with("probe", kind.as_str())
            .with("target", self.target.path.display())
            .with("offset", format!("{:#x}", self.target.offset))
            .with("host", "hardware")
    }
}

/// Ordering used between the first counter read and the flush.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    /// Fold the counter's high bit into the flush address.
    #[default]
    Dependency,
    /// A load fence; costs more cycles per sample.
    Lfence,
}

/// Back-to-back MC-Hammer samples with no waiting period.
pub fn mc_hammer_capture(target: &MappedTarget, num_samples: usize, ordering: Ordering) -> Result<Trace, HwError> {
    let mut trace = Trace::new(target.meta(ProbeKind::McHammer));
    if num_samples == 0 {
        return Ok(trace);
    }
    #[cfg(target_arch = "x86_64")]
    {
        let line = target.line();
        let mut raw = Vec::with_capacity(num_samples);
        match ordering {
            Ordering::Dependency => raw.extend((0..num_samples).map(|_| x86::mc_hammer_sample(line))),
            Ordering::Lfence => raw.extend((0..num_samples).map(|_| x86::mc_hammer_sample_lfence(line))),
        }
        for (a, b) in raw {
            trace.push(a, b);
        }
        Ok(trace)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = ordering;
        Err(HwError::UnsupportedArchitecture)
    }
}

/// Flush, busy-wait `config.wait_cycles`, timed reload; per sample.
pub fn flush_reload_capture(target: &MappedTarget, config: &ProbeConfig) -> Result<Trace, HwError> {
    if config.kind != ProbeKind::FlushReload {
        return Err(HwError::Config("flush_reload_capture needs a flush_reload config".into()));
    }
    let meta = target.meta(ProbeKind::FlushReload).with("wait", config.wait_cycles);
    let mut trace = Trace::new(meta);
    if config.num_samples == 0 {
        return Ok(trace);
    }
    #[cfg(target_arch = "x86_64")]
    {
        let line = target.line();
        let mut raw = Vec::with_capacity(config.num_samples);
        for _ in 0..config.num_samples {
            x86::clflush(line);
            let until = x86::rdtsc().wrapping_add(config.wait_cycles);
            while x86::rdtsc() < until {
                std::hint::spin_loop();
            }
            raw.push(x86::timed_reload(line));
        }
        for (a, b) in raw {
            trace.push(a, b);
        }
        Ok(trace)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(HwError::UnsupportedArchitecture)
    }
}

/// Runs the victim loop `iterations` times inside one region.
pub fn run_victim(region: Region, iterations: u64) -> Result<(), HwError> {
    #[cfg(target_arch = "x86_64")]
    {
        x86::run_victim(region == Region::Victim1, iterations);
        Ok(())
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = (region, iterations);
        Err(HwError::UnsupportedArchitecture)
    }
}

/// Virtual address of a region's entry point in this process.
pub fn victim_entry(region: Region) -> Result<usize, HwError> {
    #[cfg(target_arch = "x86_64")]
    {
        Ok(x86::victim_entry(region == Region::Victim1))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = region;
        Err(HwError::UnsupportedArchitecture)
    }
}

/// One line of /proc/self/maps: start, end, file offset, path.
fn parse_maps_line(line: &str) -> Option<(usize, usize, u64, &str)> {
    let mut fields = line.split_whitespace();
    let range = fields.next()?;
    let _perms = fields.next()?;
    let offset = u64::from_str_radix(fields.next()?, 16).ok()?;
    let _dev = fields.next()?;
    let _inode = fields.next()?;
    let path = fields.next()?;
    let (a, b) = range.split_once('-')?;
    Some((
        usize::from_str_radix(a, 16).ok()?,
        usize::from_str_radix(b, 16).ok()?,
        offset,
        path,
    ))
}

/// File and file offset backing a virtual address of this process.
pub fn file_offset_of(addr: usize, maps: &str) -> Option<HwTarget> {
    maps.lines()
        .filter_map(parse_maps_line)
        .find(|&(start, end, _, path)| addr >= start && addr < end && path.starts_with('/'))
        .map(|(start, _, offset, path)| HwTarget::new(path, offset + (addr - start) as u64))
}

/// The victim fixture's probe line (128 bytes into `victim_0`) as a file
/// target, for mapping by this or another process.
pub fn victim_target() -> Result<HwTarget, HwError> {
    let entry = victim_entry(Region::Victim0)?;
    let maps = std::fs::read_to_string("/proc/self/maps").map_err(|e| HwError::Locate(e.to_string()))?;
    file_offset_of(entry + VICTIM_PROBE_OFFSET as usize, &maps)
        .ok_or_else(|| HwError::Locate("no file mapping covers the victim code".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    pub samples: usize,
    pub mc_active_median: u64,
    pub mc_inactive_median: u64,
    pub fr_hit_median: u64,
    pub fr_miss_median: u64,
    pub verdict: Verdict,
    pub note: String,
}

impl SelfTestReport {
    pub fn mc_separation(&self) -> i64 {
        self.mc_active_median as i64 - self.mc_inactive_median as i64
    }

    pub fn fr_separation(&self) -> i64 {
        self.fr_miss_median as i64 - self.fr_hit_median as i64
    }

    pub fn to_text(&self) -> String {
        format!(
            "samples per case: {}\n\
             mc_hammer: active median {} / inactive median {} (separation {})\n\
             flush_reload: hit median {} / miss median {} (separation {})\n\
             verdict: {}\n{}",
            self.samples,
            self.mc_active_median,
            self.mc_inactive_median,
            self.mc_separation(),
            self.fr_hit_median,
            self.fr_miss_median,
            self.fr_separation(),
            match self.verdict {
                Verdict::Pass => "pass",
                Verdict::Inconclusive => "inconclusive",
            },
            self.note
        )
    }
}

/// Separation (cycles) both probes must exceed for a pass.
pub const SELF_TEST_SEPARATION: i64 = 100;

fn median(trace: &Trace) -> u64 {
    let mut v: Vec<u64> = trace.latencies().collect();
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    v[v.len() / 2]
}

/// Probes `victim_0` while a background thread loops in `region`.
fn with_victim<T>(region: Region, probe: impl FnOnce() -> T) -> T {
    use std::sync::atomic::{AtomicBool, Ordering as AtOrd};
    use std::sync::Arc;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let victim = std::thread::spawn(move || {
        while !flag.load(AtOrd::Relaxed) {
            let _ = run_victim(region, 1 << 12);
        }
    });
    // let the victim reach its loop
    std::thread::sleep(std::time::Duration::from_millis(20));
    let out = probe();
    stop.store(true, AtOrd::Relaxed);
    victim.join().expect("victim thread");
    out
}

/// Compares active and inactive medians for both probes with the victim
/// fixture running on a second thread of this process.
pub fn self_test(samples: usize) -> Result<SelfTestReport, HwError> {
    if !cfg!(target_arch = "x86_64") {
        return Err(HwError::UnsupportedArchitecture);
    }
    let target = victim_target()?.map()?;
    let fr = ProbeConfig::flush_reload(samples);
    let mc_active = with_victim(Region::Victim0, || mc_hammer_capture(&target, samples, Ordering::Dependency))?;
    let mc_inactive = with_victim(Region::Victim1, || mc_hammer_capture(&target, samples, Ordering::Dependency))?;
    let fr_hit = with_victim(Region::Victim0, || flush_reload_capture(&target, &fr))?;
    let fr_miss = with_victim(Region::Victim1, || flush_reload_capture(&target, &fr))?;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut report = SelfTestReport {
        samples,
        mc_active_median: median(&mc_active),
        mc_inactive_median: median(&mc_inactive),
        fr_hit_median: median(&fr_hit),
        fr_miss_median: median(&fr_miss),
        verdict: Verdict::Inconclusive,
        note: String::new(),
    };
    let separated =
        report.mc_separation() > SELF_TEST_SEPARATION && report.fr_separation() > SELF_TEST_SEPARATION;
    if cores < 2 {
        report.note = format!("only {cores} core available; attacker and victim cannot run in parallel");
    } else if separated {
        report.verdict = Verdict::Pass;
    } else {
        report.note = format!(
            "separation at or below {SELF_TEST_SEPARATION} cycles; check core pinning, frequency scaling and virtualization"
        );
    }
    Ok(report)
}

/// Path of the running executable, which contains the victim fixture.
pub fn current_image() -> Result<PathBuf, HwError> {
    std::env::current_exe().map_err(|e| HwError::Locate(e.to_string()))
}

pub fn is_supported() -> bool {
    cfg!(target_arch = "x86_64")
}
