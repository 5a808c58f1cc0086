//! One-way covert channel over MC-Hammer.
//!
//! The sender runs `victim_0` for a 0 bit and `victim_1` for a 1 bit, one
//! fixed-duration time slot per bit. The receiver probes `victim_0` and
//! reads a 0 wherever the slot's median flush latency is high.

use std::ops::Range;

use thiserror::Error;

use crate::model::{LatencyClass, LatencyModel, ProbeConfig, Trace};
use crate::simulator::{simulate, Region, Segment, SimConfig, SimError, VictimProgram};

#[derive(Debug, Error, PartialEq)]
pub enum CovertError {
    #[error("no bits to send")]
    NoBits,
    #[error("invalid bit `{0}`, expected 0 or 1")]
    InvalidBit(char),
    #[error("slot_iterations must be positive")]
    ZeroSlot,
    #[error("samples_per_slot must be at least 1")]
    ZeroSamplesPerSlot,
    #[error("decision threshold {threshold} must lie strictly between {inactive} and {active}")]
    Threshold {
        threshold: f64,
        inactive: f64,
        active: f64,
    },
    #[error("trace has {samples} samples, fewer than the {bits} expected bits")]
    TraceTooShort { samples: usize, bits: usize },
    #[error("slot {slot} holds {samples} samples, need at least {needed}")]
    SlotUnderfilled {
        slot: usize,
        samples: usize,
        needed: usize,
    },
    #[error("sent {sent} bits but received {received}")]
    LengthMismatch { sent: usize, received: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Victim loop iterations per bit.
    pub slot_iterations: u64,
    /// Slot medians above this decode as 0.
    pub decision_threshold: f64,
    /// Minimum number of samples a slot must hold to be decoded.
    pub samples_per_slot: usize,
    pub rng_seed: u64,
}

impl ChannelConfig {
    pub const DEFAULT_SLOT_ITERATIONS: u64 = 48;
    pub const DEFAULT_SAMPLES_PER_SLOT: usize = 16;
    /// Idle cycles appended to every slot so a fully stalled sender still
    /// finishes before the next slot opens.
    pub const SLOT_GUARD_CYCLES: u64 = 200;

    pub fn new(model: &LatencyModel, rng_seed: u64) -> Self {
        Self {
            slot_iterations: Self::DEFAULT_SLOT_ITERATIONS,
            decision_threshold: model.mc_cut(),
            samples_per_slot: Self::DEFAULT_SAMPLES_PER_SLOT,
            rng_seed,
        }
    }

    pub fn validate(&self, model: &LatencyModel) -> Result<(), CovertError> {
        if self.slot_iterations == 0 {
            return Err(CovertError::ZeroSlot);
        }
        if self.samples_per_slot == 0 {
            return Err(CovertError::ZeroSamplesPerSlot);
        }
        let inactive = model.class(LatencyClass::McInactive).median;
        let active = model.class(LatencyClass::McActive).median;
        let t = self.decision_threshold;
        if !(t > inactive && t < active) {
            return Err(CovertError::Threshold {
                threshold: t,
                inactive,
                active,
            });
        }
        Ok(())
    }

    /// Slot length in cycles: the worst case for a slot of `victim_0`
    /// iterations that each miss and get cleared, plus the guard.
    pub fn slot_cycles(&self) -> u64 {
        let worst = VictimProgram::DEFAULT_ITER_BASE_COST
            + VictimProgram::DEFAULT_MISS_PENALTY
            + VictimProgram::DEFAULT_CLEAR_PENALTY;
        self.slot_iterations * worst + Self::SLOT_GUARD_CYCLES
    }
}

/// Decoded bits with the sample range each one was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct BitFrame {
    pub bits: Vec<u8>,
    pub slots: Vec<Range<usize>>,
}

impl BitFrame {
    pub fn to_bit_string(&self) -> String {
        bits_to_string(&self.bits)
    }
}

pub fn parse_bits(text: &str) -> Result<Vec<u8>, CovertError> {
    let bits = text
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(CovertError::InvalidBit(other)),
        })
        .collect::<Result<Vec<u8>, _>>()?;
    if bits.is_empty() {
        return Err(CovertError::NoBits);
    }
    Ok(bits)
}

pub fn bits_to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

pub fn encode(bits: &[u8], config: &ChannelConfig) -> Result<VictimProgram, CovertError> {
    if bits.is_empty() {
        return Err(CovertError::NoBits);
    }
    if config.slot_iterations == 0 {
        return Err(CovertError::ZeroSlot);
    }
    let segments = bits
        .iter()
        .map(|&b| {
            let region = match b {
                0 => Region::Victim0,
                1 => Region::Victim1,
                _ => return Err(CovertError::InvalidBit(char::from(b'0' + b.min(9)))),
            };
            Ok(Segment::new(region, config.slot_iterations))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut program = VictimProgram::new(segments);
    program.slot_cycles = Some(config.slot_cycles());
    Ok(program)
}

fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Splits the trace into `expected_bits` consecutive slots of
/// [`ChannelConfig::slot_cycles`] each, starting at the first sample, and
/// thresholds each slot's median latency.
pub fn decode(trace: &Trace, config: &ChannelConfig, expected_bits: usize) -> Result<BitFrame, CovertError> {
    if config.samples_per_slot == 0 {
        return Err(CovertError::ZeroSamplesPerSlot);
    }
    if expected_bits == 0 {
        return Err(CovertError::NoBits);
    }
    if trace.len() < expected_bits {
        return Err(CovertError::TraceTooShort {
            samples: trace.len(),
            bits: expected_bits,
        });
    }
    let origin = trace.samples[0].tsc_start;
    let slot_len = config.slot_cycles();
    let mut slots = Vec::with_capacity(expected_bits);
    let mut start = 0;
    for slot in 0..expected_bits {
        let close = origin + slot_len * (slot as u64 + 1);
        let mut end = start;
        while end < trace.len() && trace.samples[end].tsc_start < close {
            end += 1;
        }
        slots.push(start..end);
        start = end;
    }
    let mut bits = Vec::with_capacity(expected_bits);
    let mut buf = Vec::new();
    for (slot, range) in slots.iter().enumerate() {
        if range.len() < config.samples_per_slot {
            return Err(CovertError::SlotUnderfilled {
                slot,
                samples: range.len(),
                needed: config.samples_per_slot,
            });
        }
        buf.clear();
        buf.extend(trace.samples[range.clone()].iter().map(|s| s.latency()));
        buf.sort_unstable();
        bits.push(if median(&buf) > config.decision_threshold { 0 } else { 1 });
    }
    Ok(BitFrame { bits, slots })
}

/// Hamming distance over length.
pub fn measure_ber(sent: &[u8], received: &BitFrame) -> Result<f64, CovertError> {
    if sent.len() != received.bits.len() {
        return Err(CovertError::LengthMismatch {
            sent: sent.len(),
            received: received.bits.len(),
        });
    }
    if sent.is_empty() {
        return Err(CovertError::NoBits);
    }
    let errors = sent.iter().zip(&received.bits).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / sent.len() as f64)
}

/// Encodes, simulates the receiver probing `victim_0`, and decodes.
pub fn transmit(
    bits: &[u8],
    config: &ChannelConfig,
    model: &LatencyModel,
) -> Result<(BitFrame, Trace), CovertError> {
    config.validate(model)?;
    let program = encode(bits, config)?;
    let mut sim = SimConfig::new(ProbeConfig::mc_hammer(0), config.rng_seed);
    sim.latency_model = *model;
    sim.start_jitter = 0;
    let (trace, _) = simulate(&program, &sim)?;
    let frame = decode(&trace, config, bits.len())?;
    Ok((frame, trace))
}
