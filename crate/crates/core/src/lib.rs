//! Machine-clear side-channel lab: a latency model and discrete-event
//! probe simulator for Flush+Reload and MC-Hammer, NICV leakage metrics, a
//! covert channel and single-trace ECDSA nonce recovery.
//!
//! Statistics are generic over [`num::Real`]; the aliases below fix the
//! scalar type.

pub mod covert;
pub mod ecdsa;
pub mod latency;
pub mod leakage;
pub mod model;
pub mod num;
pub mod simulator;
pub mod trace_io;

pub use model::{default_latency_model, LatencyModel, ProbeConfig, ProbeKind, Sample, Trace};
pub use simulator::{simulate, Region, Scenario, SimConfig, VictimProgram};

pub type LeakageDataset64 = leakage::LeakageDataset<f64>;
pub type LeakageDataset32 = leakage::LeakageDataset<f32>;
pub type NicvCurve64 = leakage::NicvCurve<f64>;
pub type NicvCurve32 = leakage::NicvCurve<f32>;
