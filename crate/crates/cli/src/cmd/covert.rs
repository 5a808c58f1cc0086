use mchammer_core::covert::{bits_to_string, measure_ber, parse_bits, transmit, ChannelConfig, CovertError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{usage, Global};

pub const RECEIVED_FILE: &str = "received.txt";

/// Send bits through the simulated covert channel and report the BER.
#[derive(Debug, clap::Args)]
#[command(group = clap::ArgGroup::new("message").required(true))]
pub struct Args {
    /// ASCII string of 0s and 1s.
    #[arg(long, group = "message")]
    bits: Option<String>,
    /// Send this many random bits drawn from the seed instead.
    #[arg(long, group = "message")]
    random: Option<usize>,
    /// Victim loop iterations per bit.
    #[arg(long, default_value_t = ChannelConfig::DEFAULT_SLOT_ITERATIONS)]
    slot_iterations: u64,
    /// Slot median above which a bit reads as 0. Defaults to the model's
    /// active/inactive cut.
    #[arg(long)]
    threshold: Option<f64>,
    /// Disable latency noise.
    #[arg(long)]
    zero_noise: bool,
}

pub fn run(global: &Global, args: Args) -> anyhow::Result<()> {
    let bits = match (&args.bits, args.random) {
        (Some(text), _) => parse_bits(text).map_err(|e| usage(e.to_string()))?,
        (None, Some(0)) => return Err(usage(CovertError::NoBits.to_string())),
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(global.seed);
            rng.set_stream(1);
            (0..n).map(|_| rng.gen_range(0..=1u8)).collect()
        }
        (None, None) => unreachable!("clap requires one message source"),
    };
    let model = if args.zero_noise {
        global.model.noiseless()
    } else {
        global.model
    };
    let mut cfg = ChannelConfig::new(&model, global.seed);
    cfg.slot_iterations = args.slot_iterations;
    if let Some(t) = args.threshold {
        cfg.decision_threshold = t;
    }
    cfg.validate(&model).map_err(|e| usage(e.to_string()))?;
    let (frame, _) = transmit(&bits, &cfg, &model)?;
    let ber = measure_ber(&bits, &frame)?;
    let received = frame.to_bit_string();
    println!("sent: {}", bits_to_string(&bits));
    println!("received: {received}");
    println!("ber: {ber}");

    if let Some(dir) = &global.out {
        ensure_dir(dir)?;
        write_file(&dir.join(RECEIVED_FILE), format!("{received}\nber={ber}\n").as_bytes())?;
        let mut m = RunManifest::new("covert", global);
        match &args.bits {
            Some(b) => m.param("bits", b),
            None => m.param("random_bits", bits.len()),
        };
        m.param("slot_iterations", cfg.slot_iterations)
            .param("threshold", cfg.decision_threshold)
            .param("zero_noise", args.zero_noise)
            .output(RECEIVED_FILE);
        m.write(dir, global)?;
    }
    Ok(())
}
