use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mchammer_core::ecdsa::DEMO_BITS;
use mchammer_core::leakage::read_nicv_csv;
use mchammer_core::simulator::read_averaged_csv;
use mchammer_core::NicvCurve64;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/demo_signing.trace")
}

fn mchammer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mchammer"))
        .args(args)
        .output()
        .expect("spawn mchammer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mchammer(args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Relative path -> contents for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn attack_reproduces_the_committed_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["attack", "--curve", "p256", "--seed", "6", "--nonce", "0x8788621D", "--save-trace", "--out", s(tmp.path())]);
    assert!(text.contains("verdict: verified"), "{text}");
    assert_eq!(
        fs::read(tmp.path().join("attack.trace")).unwrap(),
        fs::read(fixture()).unwrap()
    );
}

#[test]
fn ingested_fixture_yields_the_reference_bits() {
    let text = ok(&["attack", "--trace-file", s(&fixture())]);
    assert!(text.contains(&format!("bits: {DEMO_BITS}")), "{text}");
    assert!(text.contains("nonce: 8788621d"));
}

#[test]
fn toy_curve_recovers_noise_free() {
    for seed in ["1", "2", "3", "4", "5"] {
        let text = ok(&["attack", "--curve", "toy17", "--zero-noise", "--seed", seed]);
        assert!(text.contains("verdict: verified"), "seed {seed}: {text}");
    }
}

#[test]
fn failed_recovery_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let header: String = fs::read_to_string(fixture())
        .unwrap()
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let flat: String = (0..200u64).map(|i| format!("{i},{},{}\n", i * 300, i * 300 + 149)).collect();
    let path = tmp.path().join("flat.trace");
    fs::write(&path, header + &flat).unwrap();
    let o = mchammer(&["attack", "--trace-file", s(&path)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("peaks: 0"));
}

#[test]
fn exit_codes() {
    assert_eq!(mchammer(&["covert", "--bits", ""]).status.code(), Some(2));
    assert_eq!(mchammer(&["covert", "--bits", "0120"]).status.code(), Some(2));
    assert_eq!(mchammer(&["covert"]).status.code(), Some(2));
    assert_eq!(mchammer(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(mchammer(&["attack", "--curve", "p384"]).status.code(), Some(2));
    assert_eq!(mchammer(&["attack", "--curve", "toy17", "--nonce", "19"]).status.code(), Some(2));
    assert_eq!(mchammer(&["attack", "--trace-file", "/nonexistent/x.trace"]).status.code(), Some(4));
    assert_eq!(mchammer(&["--model", "/nonexistent/model.txt", "covert", "--bits", "1"]).status.code(), Some(4));
    assert_eq!(mchammer(&["--help"]).status.code(), Some(0));
}

#[test]
fn covert_round_trip_and_output() {
    let text = ok(&["covert", "--bits", "0", "--zero-noise"]);
    assert!(text.contains("received: 0\n") && text.contains("ber: 0\n"), "{text}");
    let text = ok(&["covert", "--bits", "0110100111", "--zero-noise"]);
    assert!(text.contains("received: 0110100111\n"), "{text}");
}

#[test]
fn model_overrides_are_applied_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.txt");
    fs::write(&model, "mc_active.std=0\nmc_inactive.std=0\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["--model", s(&model), "--out", s(&out), "covert", "--bits", "101"]);
    let snapshot = fs::read_to_string(out.join("model.txt")).unwrap();
    assert!(snapshot.contains("mc_active.std=0\n"));
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("model_overrides="));
}

#[test]
fn simulate_csv_round_trips_and_identical_classes_give_zero_nicv() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let text = ok(&["simulate", "--scenario", "mc-00", "--repetitions", "3", "--save-traces", "--out", s(&sim)]);
    assert!(text.contains("active_span: "));
    let avg = read_averaged_csv(BufReader::new(fs::File::open(sim.join("averaged.csv")).unwrap())).unwrap();
    assert!(avg.len() >= 1 << 14);

    let traces = sim.join("traces");
    let nicv = tmp.path().join("nicv");
    ok(&["nicv", "--class0", s(&traces), "--class1", s(&traces), "--out", s(&nicv)]);
    let curve: NicvCurve64 = read_nicv_csv(BufReader::new(fs::File::open(nicv.join("nicv.csv")).unwrap())).unwrap();
    assert!(curve.values.iter().all(|&v| v == 0.0));
    assert_eq!(
        fs::read_to_string(nicv.join("pois.csv")).unwrap(),
        "threshold,pois\n0.2,0\n0.3,0\n0.4,0\n0.5,0\n"
    );
}

#[test]
fn mismatched_class_sizes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", "--scenario", "custom", "--segments", "victim_0:8", "--samples", "64", "--repetitions", "2", "--save-traces", "--out", s(&a)]);
    ok(&["simulate", "--scenario", "custom", "--segments", "victim_1:8", "--samples", "64", "--repetitions", "3", "--save-traces", "--out", s(&b)]);
    let o = mchammer(&["nicv", "--class0", s(&a.join("traces")), "--class1", s(&b.join("traces"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatched dataset shapes"));
}

#[test]
fn every_command_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let classes = tmp.path().join("classes");
    for (name, seg) in [("c0", "victim_0:64"), ("c1", "victim_1:64")] {
        ok(&["simulate", "--scenario", "custom", "--segments", seg, "--samples", "256", "--repetitions", "6", "--save-traces", "--out", s(&classes.join(name))]);
    }
    let c0 = classes.join("c0/traces");
    let c1 = classes.join("c1/traces");
    let runs: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--scenario".into(), "fr-01".into(), "--repetitions".into(), "2".into(), "--save-traces".into()],
        vec!["nicv".into(), "--class0".into(), s(&c0).into(), "--class1".into(), s(&c1).into()],
        vec!["covert".into(), "--random".into(), "300".into()],
        vec!["attack".into(), "--save-trace".into()],
        vec!["attack".into(), "--curve".into(), "toy17".into(), "--save-trace".into()],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for round in 0..2 {
            let dir = tmp.path().join(format!("run{i}_{round}"));
            let mut full: Vec<&str> = vec!["--seed", "11", "--out", s(&dir)];
            full.extend(args.iter().map(String::as_str));
            let text = ok(&full);
            outputs.push((text, snapshot(&dir)));
        }
        assert!(outputs[0].1.contains_key(Path::new("manifest.txt")), "{args:?}");
        assert!(outputs[0] == outputs[1], "{args:?} differs between runs");
    }
}
