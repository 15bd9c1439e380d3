use std::path::Path;
use std::process::{Command, Output};

fn spiketrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiketrack"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spiketrack(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 output")
}

#[test]
fn oracle_pipeline_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ok(d, &["gen", "--seed", "4", "--out", "seq.csv", "--frames", "12", "--vx", "2", "--vy", "1", "--noise-rate", "3"]);
    assert!(gen.starts_with("spiketrack gen seed=4 config="), "{gen}");
    assert!(d.join("seq_gt.csv").exists());

    let agg = ok(d, &["aggregate", "--events", "seq.csv", "--out", "frames", "--T", "2", "--preview"]);
    assert_eq!(agg.lines().filter(|l| l.starts_with("frame ")).count(), 12);
    assert!(d.join("frames/frame00011_t1.raw").exists());
    assert!(d.join("frames/frame00000_t0.png").exists());

    let track = ok(d, &["track", "--weights", "oracle", "--events", "seq.csv", "--gt", "seq_gt.csv", "--out", "res.csv"]);
    assert!(track.contains("auc 1.0000, pr 1.0000"), "{track}");
    let eval = ok(d, &["eval", "--results", "res.csv", "--gt", "seq_gt.csv", "--out", "summary.json"]);
    assert!(eval.contains("11 frames"), "{eval}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["auc"], 1.0);
    assert_eq!(summary["pr"], 1.0);
}

#[test]
fn failed_runs_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "1", "--out", "seq.csv", "--frames", "4", "--vx", "1"]);
    let out = spiketrack(d, &["aggregate", "--events", "seq.csv", "--out", "frames", "--alpha", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    assert!(!d.join("frames").exists());

    let out = spiketrack(d, &["track", "--weights", "missing.bin", "--events", "seq.csv", "--gt", "seq_gt.csv", "--out", "r.csv"]);
    assert!(!out.status.success());
    assert!(!d.join("r.csv").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.toml"), "frames = 5\nobject_w = 10.0\nobject_h = 10.0\n").unwrap();
    let from_file = ok(d, &["gen", "--config", "gen.toml", "--out", "a.csv"]);
    assert!(from_file.contains("5 frames"), "{from_file}");
    let overridden = ok(d, &["gen", "--config", "gen.toml", "--frames", "7", "--out", "b.csv"]);
    assert!(overridden.contains("7 frames"), "{overridden}");
    let hash = |s: &str| s.lines().next().unwrap().split("config=").nth(1).unwrap().to_string();
    assert_ne!(hash(&from_file), hash(&overridden));

    std::fs::write(d.join("bad.toml"), "frame = 5\n").unwrap();
    let out = spiketrack(d, &["gen", "--config", "bad.toml", "--out", "c.csv"]);
    assert!(!out.status.success());
}

#[test]
fn energy_report_splits_mac_and_ac_terms() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--seed", "2", "--out", "seq.bin", "--frames", "3", "--vx", "1.5", "--noise-rate", "5"]);
    let out = ok(d, &["energy", "--preset", "toy", "--events", "seq.bin", "--gt", "seq_gt.csv", "--out", "e.json"]);
    assert!(out.contains("calibrated"), "{out}");
    assert!(out.contains("MAC") && out.contains("AC"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    assert_eq!(report["timesteps"], 4);
    assert!(report["ac_term_pj"].as_f64().unwrap() > 0.0);
    assert!(d.join("e.csv").exists());
}
