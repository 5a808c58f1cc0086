//! Single-trace nonce recovery from an MC-Hammer trace of the doubling
//! routine.
//!
//! Every loop iteration of the signer runs the doubling routine once, which
//! shows up as a burst of slow flushes. The time between bursts is short
//! when the iteration only doubled (a 0 bit) and long when it also added
//! (a 1 bit).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_traits::{Num, One};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::curve::{CurveParams, Op, Point};
use super::sign::{random_scalar, recover_private_key, sign, KeyPair, Signature};
use super::EcError;
use crate::model::{LatencyModel, ProbeConfig, ProbeKind, Trace};
use crate::simulator::{simulate_stream, Region, Segment, SimConfig, SimError, VictimProgram, VictimSchedule};

/// Flushes slower than this mark the doubling routine.
pub const PEAK_THRESHOLD: u64 = 250;
/// Above-threshold runs separated by at most this many quiet samples are
/// one peak.
pub const PEAK_MERGE_GAP: usize = 20;
/// Gap length (samples) between a doubling-only and a doubling-and-add
/// iteration when clustering is not usable.
pub const FIXED_GAP_CUT: f64 = 100.0;
/// Two-means clusters whose centroids are closer than this ratio are
/// treated as one cluster.
pub const MIN_CENTROID_RATIO: f64 = 1.25;

/// Midpoints of above-threshold runs.
pub fn detect_peaks(trace: &Trace, threshold: u64) -> Vec<usize> {
    let lat: Vec<u64> = trace.latencies().collect();
    detect_peaks_in(&lat, threshold, PEAK_MERGE_GAP)
}

pub fn detect_peaks_in(latencies: &[u64], threshold: u64, merge_gap: usize) -> Vec<usize> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &l) in latencies.iter().enumerate() {
        if l <= threshold {
            continue;
        }
        match runs.last_mut() {
            Some((_, end)) if i - *end <= merge_gap + 1 => *end = i,
            _ => runs.push((i, i)),
        }
    }
    runs.into_iter().map(|(a, b)| (a + b) / 2).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapMethod {
    TwoMeans,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapClassification {
    pub ops: Vec<Op>,
    pub gaps: Vec<usize>,
    /// Gaps longer than this are DA.
    pub cut: f64,
    /// The method actually applied, after any fallback.
    pub method: GapMethod,
    /// Distance of each gap from `cut`, in samples.
    pub margins: Vec<f64>,
}

/// Optimal 1-D split of the sorted values into two non-empty clusters by
/// total within-cluster squared error. Returns the split index and both
/// centroids.
fn two_means(sorted: &[f64]) -> Option<(usize, f64, f64)> {
    let n = sorted.len();
    if n < 2 {
        return None;
    }
    let total: f64 = sorted.iter().sum();
    let total_sq: f64 = sorted.iter().map(|v| v * v).sum();
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for i in 1..n {
        sum += sorted[i - 1];
        sq += sorted[i - 1] * sorted[i - 1];
        if sorted[i - 1] == sorted[i] {
            continue;
        }
        let (nl, nr) = (i as f64, (n - i) as f64);
        let sse = (sq - sum * sum / nl) + ((total_sq - sq) - (total - sum).powi(2) / nr);
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, i));
        }
    }
    let (_, i) = best?;
    let lo = sorted[..i].iter().sum::<f64>() / i as f64;
    let hi = sorted[i..].iter().sum::<f64>() / (n - i) as f64;
    Some((i, lo, hi))
}

pub fn classify_gaps(peaks: &[usize], method: GapMethod) -> Result<GapClassification, EcError> {
    if peaks.len() < 2 {
        return Err(EcError::TooFewPeaks { found: peaks.len() });
    }
    let gaps: Vec<usize> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    let (cut, method) = match method {
        GapMethod::Fixed(cut) => (cut, method),
        GapMethod::TwoMeans => {
            let mut sorted: Vec<f64> = gaps.iter().map(|&g| g as f64).collect();
            sorted.sort_by(f64::total_cmp);
            match two_means(&sorted) {
                Some((split, lo, hi))
                    if split > 1 && sorted.len() - split > 1 && hi >= lo * MIN_CENTROID_RATIO =>
                {
                    ((lo + hi) / 2.0, GapMethod::TwoMeans)
                }
                _ => (FIXED_GAP_CUT, GapMethod::Fixed(FIXED_GAP_CUT)),
            }
        }
    };
    let ops = gaps
        .iter()
        .map(|&g| if g as f64 > cut { Op::DA } else { Op::D })
        .collect();
    let margins = gaps.iter().map(|&g| (g as f64 - cut).abs()).collect();
    Ok(GapClassification {
        ops,
        gaps,
        cut,
        method,
        margins,
    })
}

/// A leading 1 followed by one bit per op.
pub fn recover_nonce(ops: &[Op]) -> BigUint {
    ops.iter().fold(BigUint::one(), |k, op| (k << 1u8) + BigUint::from(op.bit()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonceBits {
    pub ops: Vec<Op>,
    pub k: BigUint,
    pub confidence: Vec<f64>,
}

impl NonceBits {
    pub fn new(ops: Vec<Op>, confidence: Vec<f64>) -> Self {
        let k = recover_nonce(&ops);
        Self { ops, k, confidence }
    }

    pub fn bit_string(&self) -> String {
        self.k.to_str_radix(2)
    }
}

/// Iteration counts of the simulated signer. The doubling routine lives in
/// `victim_0`; everything else runs in `victim_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SigningLayout {
    pub preamble: u64,
    pub double_iterations: u64,
    /// Per-iteration bookkeeping outside the point routines.
    pub loop_iterations: u64,
    pub add_iterations: u64,
    pub postamble: u64,
}

impl Default for SigningLayout {
    fn default() -> Self {
        Self {
            preamble: 100,
            double_iterations: 10,
            loop_iterations: 120,
            add_iterations: 126,
            postamble: 100,
        }
    }
}

/// Victim program for one signing: per op a doubling, the loop work and,
/// for DA, an addition; then one more doubling-routine call at the end of
/// the loop, which closes the last gap.
pub fn signing_program(ops: &[Op], layout: &SigningLayout) -> VictimProgram {
    let mut segs = vec![Segment::new(Region::Victim1, layout.preamble)];
    for op in ops {
        segs.push(Segment::new(Region::Victim0, layout.double_iterations));
        segs.push(Segment::new(Region::Victim1, layout.loop_iterations));
        if *op == Op::DA {
            segs.push(Segment::new(Region::Victim1, layout.add_iterations));
        }
    }
    segs.push(Segment::new(Region::Victim0, layout.double_iterations));
    segs.push(Segment::new(Region::Victim1, layout.postamble));
    VictimProgram::new(segs.into_iter().filter(|s| s.iterations > 0).collect())
}

/// MC-Hammer on the doubling routine, sampling for as long as the signer
/// runs.
pub fn signing_sim_config(model: &LatencyModel, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(ProbeConfig::mc_hammer(0), seed);
    cfg.latency_model = *model;
    cfg.probe_target = Region::Victim0;
    cfg
}

pub fn simulate_signing(
    ops: &[Op],
    layout: &SigningLayout,
    config: &SimConfig,
    stream: u64,
) -> Result<(Trace, VictimSchedule), SimError> {
    simulate_stream(&signing_program(ops, layout), config, stream)
}

/// Scalars are decimal on curves with a modulus below 2^64 and lowercase
/// hex otherwise.
pub fn format_scalar(v: &BigUint, curve: &CurveParams) -> String {
    if curve.p.bits() <= 64 {
        v.to_str_radix(10)
    } else {
        v.to_str_radix(16)
    }
}

pub fn parse_scalar(text: &str, curve: &CurveParams) -> Result<BigUint, EcError> {
    let radix = if curve.p.bits() <= 64 { 10 } else { 16 };
    let digits = text.strip_prefix("0x").unwrap_or(text);
    BigUint::from_str_radix(digits, radix).map_err(|_| EcError::Format(format!("bad scalar `{text}`")))
}

/// Records what the attacker is assumed to know next to the trace.
pub fn annotate_trace(trace: &mut Trace, sig: &Signature, public: &Point, curve: &CurveParams) {
    let m = &mut trace.meta;
    m.set("curve", &curve.name);
    m.set("sig_r", format_scalar(&sig.r, curve));
    m.set("sig_s", format_scalar(&sig.s, curve));
    m.set("hash", format_scalar(&sig.hash, curve));
    if let Point::Affine { x, y } = public {
        m.set("pubkey_x", format_scalar(x, curve));
        m.set("pubkey_y", format_scalar(y, curve));
    }
}

/// Inverse of [`annotate_trace`]. The message itself is not stored.
pub fn signing_context(trace: &Trace) -> Result<(CurveParams, Signature, Point), EcError> {
    let get = |key: &str| {
        trace
            .meta
            .get(key)
            .ok_or_else(|| EcError::Format(format!("trace metadata lacks `{key}`")))
    };
    let curve = CurveParams::by_name(get("curve")?)?;
    let scalar = |key: &str| parse_scalar(get(key)?, &curve);
    let sig = Signature {
        m: Vec::new(),
        hash: scalar("hash")?,
        r: scalar("sig_r")?,
        s: scalar("sig_s")?,
    };
    let public = Point::affine(scalar("pubkey_x")?, scalar("pubkey_y")?);
    if !curve.is_on_curve(&public) {
        return Err(EcError::NotOnCurve(public.to_string()));
    }
    Ok((curve, sig, public))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackFailure {
    TooFewPeaks { found: usize },
    /// The recovered nonce fails the public-key check.
    Unverified { candidate: BigUint },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub peaks: Vec<usize>,
    pub classification: Option<GapClassification>,
    pub nonce: Option<NonceBits>,
    pub outcome: Result<BigUint, AttackFailure>,
}

impl AttackReport {
    pub fn recovered(&self) -> Option<&BigUint> {
        self.outcome.as_ref().ok()
    }

    /// Human-readable summary: peaks, gap histogram, bits, key, verdict.
    pub fn to_text(&self, curve: &CurveParams) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "peaks: {}", self.peaks.len());
        if let Some(c) = &self.classification {
            let method = match c.method {
                GapMethod::TwoMeans => "two_means".to_string(),
                GapMethod::Fixed(cut) => format!("fixed({cut})"),
            };
            let _ = writeln!(out, "gap_cut: {:.1} ({method})", c.cut);
            let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
            for g in &c.gaps {
                *hist.entry(g / 10 * 10).or_default() += 1;
            }
            let _ = writeln!(out, "gap_histogram:");
            for (bucket, count) in hist {
                let _ = writeln!(out, "  {:>5}-{:<5} {count}", bucket, bucket + 9);
            }
        }
        if let Some(n) = &self.nonce {
            let _ = writeln!(out, "bits: {}", n.bit_string());
            let _ = writeln!(out, "nonce: {}", format_scalar(&n.k, curve));
        }
        match &self.outcome {
            Ok(alpha) => {
                let _ = writeln!(out, "private_key: {}", format_scalar(alpha, curve));
                let _ = writeln!(out, "verdict: verified");
            }
            Err(AttackFailure::TooFewPeaks { found }) => {
                let _ = writeln!(out, "verdict: failed, {found} peaks is too few to classify");
            }
            Err(AttackFailure::Unverified { candidate }) => {
                let _ = writeln!(out, "candidate_key: {}", format_scalar(candidate, curve));
                let _ = writeln!(out, "verdict: failed, candidate does not match the public key");
                if let Some(n) = &self.nonce {
                    let mut weakest: Vec<(usize, f64)> = n.confidence.iter().copied().enumerate().collect();
                    weakest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                    let _ = writeln!(out, "least_confident_gaps:");
                    for (i, m) in weakest.into_iter().take(8) {
                        let _ = writeln!(out, "  op {i} {} margin {m:.1}", n.ops[i]);
                    }
                }
            }
        }
        out
    }
}

/// Peaks, gaps, nonce, private key. A key is only returned once
/// [alpha]G matches `public`.
pub fn attack_single_trace(
    trace: &Trace,
    sig: &Signature,
    public: &Point,
    curve: &CurveParams,
) -> Result<AttackReport, EcError> {
    if trace.probe_kind() == Some(ProbeKind::FlushReload) {
        return Err(EcError::WrongProbe);
    }
    let peaks = detect_peaks(trace, PEAK_THRESHOLD);
    let classification = match peaks.len() {
        0 => {
            return Ok(AttackReport {
                peaks,
                classification: None,
                nonce: None,
                outcome: Err(AttackFailure::TooFewPeaks { found: 0 }),
            })
        }
        // only the closing doubling call: the loop never ran, k = 1
        1 => None,
        _ => Some(classify_gaps(&peaks, GapMethod::TwoMeans)?),
    };
    let nonce = match &classification {
        Some(c) => NonceBits::new(c.ops.clone(), c.margins.clone()),
        None => NonceBits::new(Vec::new(), Vec::new()),
    };
    let outcome = match recover_private_key(sig, &nonce.k, public, curve) {
        Ok(alpha) => Ok(alpha),
        Err(EcError::RecoveryFailed { candidate }) => Err(AttackFailure::Unverified { candidate }),
        Err(e) => return Err(e),
    };
    Ok(AttackReport {
        peaks,
        classification,
        nonce: Some(nonce),
        outcome,
    })
}

/// Everything produced by one simulated signing.
#[derive(Debug, Clone)]
pub struct SigningRun {
    pub keypair: KeyPair,
    pub nonce: BigUint,
    pub signature: Signature,
    /// MC-Hammer trace annotated with the public signing context.
    pub trace: Trace,
    pub schedule: VictimSchedule,
}

/// Key pair and (unless given) nonce come from stream 1 of `seed`; the
/// trace from stream 0. Random nonces that give r = 0 or s = 0 are redrawn.
pub fn simulate_signing_run(
    curve: &CurveParams,
    model: &LatencyModel,
    seed: u64,
    nonce: Option<&BigUint>,
    message: &[u8],
) -> Result<SigningRun, EcError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let keypair = KeyPair::generate(&mut rng, curve);
    let (nonce, signature) = match nonce {
        Some(k) => (k.clone(), sign(message, &keypair, k, curve)?),
        None => loop {
            let k = random_scalar(&mut rng, curve);
            match sign(message, &keypair, &k, curve) {
                Ok(sig) => break (k, sig),
                Err(EcError::RejectedNonce(_)) => continue,
                Err(e) => return Err(e),
            }
        },
    };
    let (_, ops) = curve.scalar_mul_leaky(&nonce)?;
    let config = signing_sim_config(model, seed);
    let (mut trace, schedule) = simulate_signing(&ops, &SigningLayout::default(), &config, 0)?;
    annotate_trace(&mut trace, &signature, &keypair.public, curve);
    Ok(SigningRun {
        keypair,
        nonce,
        signature,
        trace,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_latency_model;
    use crate::simulator::Experienced;
    use proptest::prelude::*;

    #[test]
    fn peaks_in_small_inputs() {
        assert!(detect_peaks_in(&[149; 50], 250, 8).is_empty());
        let mut l = vec![149u64; 50];
        l[17] = 306;
        assert_eq!(detect_peaks_in(&l, 250, 8), [17]);
        l[19] = 306;
        l[20] = 306;
        assert_eq!(detect_peaks_in(&l, 250, 8), [18]);
        l[40] = 300;
        assert_eq!(detect_peaks_in(&l, 250, 8), [18, 40]);
        assert_eq!(detect_peaks_in(&l, 250, 0), [17, 19, 40]);
    }

    #[test]
    fn gap_classes() {
        let peaks = [0, 70, 142, 282];
        let c = classify_gaps(&peaks, GapMethod::TwoMeans).unwrap();
        assert_eq!(c.ops, [Op::D, Op::D, Op::DA]);
        assert_eq!(c.method, GapMethod::Fixed(FIXED_GAP_CUT));

        let peaks = [0, 70, 200, 270, 400, 470];
        let c = classify_gaps(&peaks, GapMethod::TwoMeans).unwrap();
        assert_eq!(c.ops, [Op::D, Op::DA, Op::D, Op::DA, Op::D]);
        assert_eq!(c.method, GapMethod::TwoMeans);
        assert_eq!(c.cut, 100.0);
        assert_eq!(c.margins, [30.0; 5]);

        let c = classify_gaps(&[0, 70, 140, 210], GapMethod::TwoMeans).unwrap();
        assert_eq!(c.ops, [Op::D; 3]);
        let c = classify_gaps(&[0, 130, 260], GapMethod::TwoMeans).unwrap();
        assert_eq!(c.ops, [Op::DA; 2]);
        assert!(matches!(classify_gaps(&[5], GapMethod::TwoMeans), Err(EcError::TooFewPeaks { found: 1 })));
    }

    #[test]
    fn nonce_from_ops() {
        assert_eq!(recover_nonce(&[]), BigUint::one());
        assert_eq!(recover_nonce(&[Op::D, Op::DA]), BigUint::from(5u8));
    }

    #[test]
    fn noiseless_signing_trace_has_one_peak_per_doubling_call() {
        let model = default_latency_model().noiseless();
        let ops = [Op::D, Op::DA, Op::DA, Op::D, Op::D, Op::DA];
        let cfg = signing_sim_config(&model, 4);
        let (trace, schedule) = simulate_signing(&ops, &SigningLayout::default(), &cfg, 0).unwrap();
        let peaks = detect_peaks(&trace, PEAK_THRESHOLD);
        assert_eq!(peaks.len(), ops.len() + 1);
        // ground truth: each peak sits inside a doubling call
        let calls: Vec<(u64, u64)> = {
            let mut v: Vec<(u64, u64)> = Vec::new();
            let mut prev_iter = None;
            for e in schedule.events.iter().filter(|e| e.region == Region::Victim0) {
                assert_eq!(e.experienced, Experienced::MachineClear);
                match (prev_iter, v.last_mut()) {
                    (Some(p), Some(last)) if e.iteration == p + 1 => last.1 = e.cycle,
                    _ => v.push((e.cycle, e.cycle)),
                }
                prev_iter = Some(e.iteration);
            }
            v
        };
        assert_eq!(calls.len(), peaks.len());
        for (p, (start, end)) in peaks.iter().zip(&calls) {
            let t = trace.samples[*p].tsc_start;
            assert!(t >= *start && t <= end + 1000, "peak at {t} outside [{start}, {end}]");
        }
        let c = classify_gaps(&peaks, GapMethod::TwoMeans).unwrap();
        assert_eq!(c.ops, ops);
    }

    #[test]
    fn attack_without_victim_reports_too_few_peaks() {
        let c = CurveParams::toy17();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kp = KeyPair::generate(&mut rng, &c);
        let sig = sign(b"x", &kp, &BigUint::from(5u8), &c).unwrap();
        let mut trace = Trace::default();
        for i in 0..500 {
            trace.push(i * 210, i * 210 + 149);
        }
        let r = attack_single_trace(&trace, &sig, &kp.public, &c).unwrap();
        assert_eq!(r.outcome, Err(AttackFailure::TooFewPeaks { found: 0 }));
        assert!(r.to_text(&c).contains("verdict: failed"));
    }

    #[test]
    fn context_round_trips_through_metadata() {
        for c in [CurveParams::toy17(), CurveParams::p256()] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let kp = KeyPair::generate(&mut rng, &c);
            let sig = sign(b"m", &kp, &BigUint::from(5u8), &c).unwrap();
            let mut t = Trace::default();
            annotate_trace(&mut t, &sig, &kp.public, &c);
            let (c2, s2, p2) = signing_context(&t).unwrap();
            assert_eq!(c2, c);
            assert_eq!((s2.r, s2.s, s2.hash), (sig.r, sig.s, sig.hash));
            assert_eq!(p2, kp.public);
        }
    }

    #[test]
    fn toy_signings_recover_every_nonce_noise_free() {
        let c = CurveParams::toy17();
        let model = default_latency_model().noiseless();
        for k in 1..19u64 {
            let k = BigUint::from(k);
            let run = match simulate_signing_run(&c, &model, 3, Some(&k), b"toy") {
                Ok(run) => run,
                Err(EcError::RejectedNonce(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            let r = attack_single_trace(&run.trace, &run.signature, &run.keypair.public, &c).unwrap();
            assert_eq!(r.nonce.unwrap().k, k);
            assert_eq!(r.outcome, Ok(run.keypair.alpha));
        }
    }

    #[test]
    fn wrong_probe_kind_is_rejected() {
        let c = CurveParams::toy17();
        let run = simulate_signing_run(&c, &default_latency_model(), 1, None, b"m").unwrap();
        let mut t = run.trace.clone();
        t.meta.set("probe", "flush_reload");
        assert_eq!(
            attack_single_trace(&t, &run.signature, &run.keypair.public, &c),
            Err(EcError::WrongProbe)
        );
    }

    proptest! {
        #[test]
        fn gap_split_recovers_synthetic_bits(
            ops in proptest::collection::vec(prop_oneof![Just(Op::D), Just(Op::DA)], 2..300),
            jitter in proptest::collection::vec(-12i64..=12, 300),
        ) {
            let mut peaks = vec![0usize];
            for (op, j) in ops.iter().zip(&jitter) {
                let base = if *op == Op::DA { 130 } else { 70 };
                let next = *peaks.last().unwrap() as i64 + base + j;
                peaks.push(next as usize);
            }
            let c = classify_gaps(&peaks, GapMethod::TwoMeans).unwrap();
            prop_assert_eq!(c.ops, ops);
        }
    }
}
