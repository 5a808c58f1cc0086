//! ECDSA with a leaky double-and-add and the single-trace attack on it.

pub mod attack;
pub mod curve;
pub mod sign;

use num_bigint::BigUint;
use thiserror::Error;

pub use attack::{
    attack_single_trace, classify_gaps, detect_peaks, recover_nonce, AttackFailure, AttackReport,
    GapClassification, GapMethod, NonceBits, SigningLayout, SigningRun, simulate_signing_run,
};
pub use curve::{CurveParams, Op, Point};
pub use sign::{recover_private_key, sign, sign_prehashed, verify, KeyPair, Signature};

/// 32-bit nonce of the single-trace demo; its binary form is [`DEMO_BITS`].
pub const DEMO_NONCE: u64 = 0x8788_621D;
pub const DEMO_BITS: &str = "10000111100010000110001000011101";
/// Seed of the committed fixture trace `tests/fixtures/demo_signing.trace`.
pub const DEMO_SEED: u64 = 6;
/// Message signed by the demo and fixture runs.
pub const ATTACK_MESSAGE: &[u8] = b"mchammer single-trace demo";

#[derive(Debug, Error, PartialEq)]
pub enum EcError {
    #[error("point {0} is not on the curve")]
    NotOnCurve(String),
    #[error("scalar must lie in [1, n-1]")]
    ScalarOutOfRange,
    #[error("nonce rejected: {0}")]
    RejectedNonce(&'static str),
    #[error("recovered key does not match the public key (candidate {candidate:x})")]
    RecoveryFailed { candidate: BigUint },
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("unknown curve `{0}`, expected p256 or toy17")]
    UnknownCurve(String),
    #[error("need at least 2 peaks, found {found}")]
    TooFewPeaks { found: usize },
    #[error("trace was not captured with MC-Hammer")]
    WrongProbe,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
}
