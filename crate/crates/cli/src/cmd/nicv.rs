use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mchammer_core::leakage::{nicv_two_class, poi_table, write_nicv_csv};
use mchammer_core::trace_io::read_trace;
use mchammer_core::{LeakageDataset64, NicvCurve64, Trace};

use crate::manifest::{ensure_dir, write_file, RunManifest};
use crate::{usage, Global};

pub const NICV_FILE: &str = "nicv.csv";
pub const COMPARE_FILE: &str = "nicv_compare.csv";
pub const POI_FILE: &str = "pois.csv";

/// NICV between two directories of traces, one per secret class.
#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    class0: PathBuf,
    #[arg(long)]
    class1: PathBuf,
    /// POI thresholds on sqrt(NICV).
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5")]
    thresholds: Vec<f64>,
    /// Class 0 traces of a second technique; POI counts are reported as a
    /// ratio against it.
    #[arg(long, requires = "compare1")]
    compare0: Option<PathBuf>,
    #[arg(long, requires = "compare0")]
    compare1: Option<PathBuf>,
}

/// Every `*.trace` file in `dir`, in file-name order.
pub fn load_dir(dir: &Path) -> anyhow::Result<Vec<Trace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "trace"));
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("no .trace files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_trace(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

fn curve_for(class0: &Path, class1: &Path) -> anyhow::Result<NicvCurve64> {
    let t0 = load_dir(class0)?;
    let t1 = load_dir(class1)?;
    if t0.len() != t1.len() {
        anyhow::bail!(
            "mismatched dataset shapes: {} traces in class 0, {} in class 1",
            t0.len(),
            t1.len()
        );
    }
    let ds = LeakageDataset64::from_traces(&t0, &t1)?;
    Ok(nicv_two_class(&ds)?)
}

fn ratio(a: usize, b: usize) -> String {
    if b == 0 {
        "inf".to_string()
    } else {
        format!("{:.2}", a as f64 / b as f64)
    }
}

pub fn run(global: &Global, args: Args) -> anyhow::Result<()> {
    if args.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(usage("thresholds must lie in [0, 1]"));
    }
    let curve = curve_for(&args.class0, &args.class1)?;
    let table = poi_table(&curve, &args.thresholds);
    let compare = match (&args.compare0, &args.compare1) {
        (Some(c0), Some(c1)) => Some(curve_for(c0, c1)?),
        _ => None,
    };
    let compare_table = compare.as_ref().map(|c| poi_table(c, &args.thresholds));

    let mut text = String::new();
    match &compare_table {
        None => {
            text.push_str("threshold,pois\n");
            for (t, n) in &table {
                text.push_str(&format!("{t},{n}\n"));
            }
        }
        Some(ct) => {
            text.push_str("threshold,pois,compare_pois,ratio\n");
            for ((t, n), (_, m)) in table.iter().zip(ct) {
                text.push_str(&format!("{t},{n},{m},{}\n", ratio(*n, *m)));
            }
        }
    }
    println!("points: {}", curve.len());
    print!("{text}");

    if let Some(dir) = &global.out {
        ensure_dir(dir)?;
        let mut csv = Vec::new();
        write_nicv_csv(&curve, &mut csv)?;
        write_file(&dir.join(NICV_FILE), &csv)?;
        write_file(&dir.join(POI_FILE), text.as_bytes())?;
        let mut m = RunManifest::new("nicv", global);
        m.param("class0", args.class0.display())
            .param("class1", args.class1.display())
            .param(
                "thresholds",
                args.thresholds.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            )
            .output(NICV_FILE)
            .output(POI_FILE);
        if let (Some(c), Some(c0), Some(c1)) = (&compare, &args.compare0, &args.compare1) {
            let mut csv = Vec::new();
            write_nicv_csv(c, &mut csv)?;
            write_file(&dir.join(COMPARE_FILE), &csv)?;
            m.param("compare0", c0.display())
                .param("compare1", c1.display())
                .output(COMPARE_FILE);
        }
        m.write(dir, global)?;
    }
    Ok(())
}
