use std::path::Path;
use std::process::{Command, Output};

use specklenav::harness::Scenario;

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specklenav"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut Scenario)) -> String {
    let mut sc = Scenario::default();
    sc.surgery.frame_count = 30;
    sc.surgery.save_frames = vec![0];
    sc.sweep.enabled = false;
    edit(&mut sc);
    let p = dir.join("scenario.json");
    std::fs::write(&p, serde_json::to_string_pretty(&sc).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = bin(&["run", "--config", &cfg], &a);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&bin(&["run", "--config", &cfg], &b)), 0);
    for f in [
        "report.json",
        "execution.csv",
        "records.csv",
        "timing.csv",
        "signal.csv",
        "cloud_0000.ply",
        "calibration_set.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());

    let c = dir.path().join("c");
    bin(&["run", "--config", &cfg, "--seed", "5"], &c);
    let rc = std::fs::read_to_string(c.join("report.json")).unwrap();
    assert_ne!(ra, rc.as_bytes());
    assert!(rc.contains("\"seed\": 5"));

    let report = a.join("report.json");
    let t = bin(&["emit-table", "--report", report.to_str().unwrap(), "--table", "execution-error"], &a.join("t"));
    assert_eq!(code(&t), 0);
    assert_eq!(t.stdout, std::fs::read(a.join("execution.csv")).unwrap());
    let missing = bin(&["emit-table", "--report", report.to_str().unwrap(), "--table", "timing"], &a.join("t"));
    assert_eq!(code(&missing), 4);
    let unknown = bin(&["emit-table", "--report", report.to_str().unwrap(), "--table", "nope"], &a.join("t"));
    assert_eq!(code(&unknown), 3);

    // downstream subcommands accept the run's own files
    let f = bin(&["fuse", "--records", a.join("records.csv").to_str().unwrap()], &a.join("f"));
    assert_eq!(code(&f), 0, "{}", String::from_utf8_lossy(&f.stderr));
    assert!(a.join("f/correction.json").exists());
    let g = bin(&["breathe", "--signal", a.join("signal.csv").to_str().unwrap()], &a.join("g"));
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let gates: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("g/gates.json")).unwrap()).unwrap();
    assert_eq!(gates["samples"], 30);
    let d = bin(&["detect", "--cloud", a.join("cloud_0000.ply").to_str().unwrap()], &a.join("d"));
    assert_eq!(code(&d), 0, "{}", String::from_utf8_lossy(&d.stderr));
    let m: serde_json::Value = serde_json::from_slice(&d.stdout).unwrap();
    assert!((m["radius_mm"].as_f64().unwrap() - 10.0).abs() < 1.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&bin(&["run", "--config", bad.to_str().unwrap()], &out)), 3);
    assert_eq!(code(&bin(&["run", "--config", "/nonexistent/x.json"], &out)), 3);
    let invalid = small_config(dir.path(), |s| s.surgery.frame_count = 0);
    assert_eq!(code(&bin(&["run", "--config", &invalid], &out)), 3);

    let gate = small_config(dir.path(), |s| s.calibration.corner_noise_px = 2.0);
    let o = bin(&["run", "--config", &gate], &out);
    assert_eq!(code(&o), 2);
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("FAILED-GATE") && !report.contains("\"execution\""));
    assert_eq!(code(&bin(&["calibrate", "--config", &gate], &out)), 2);

    let nomarker = small_config(dir.path(), |s| s.marker_present = false);
    assert_eq!(code(&bin(&["run", "--config", &nomarker], &out)), 4);
    assert_eq!(code(&bin(&["detect", "--config", &nomarker], &out)), 4);
}

#[test]
fn simulate_then_detect() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["simulate", "--frames", "2"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("cloud_0001.ply").exists());
    assert!(dir.path().join("cloud_0001.json").exists());
    let d = bin(&["detect", "--cloud", dir.path().join("cloud_0001.ply").to_str().unwrap()], &dir.path().join("d"));
    assert_eq!(code(&d), 0);
    // same frame as the default detect input
    let d0 = bin(&["detect"], &dir.path().join("e"));
    let d1 = bin(&["detect", "--cloud", dir.path().join("cloud_0000.ply").to_str().unwrap()], &dir.path().join("f"));
    assert_eq!(d0.stdout, d1.stdout);
}

#[test]
fn fov_queries() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["fov", "--distance", "400", "--rect", "300", "200", "--extent", "100"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["knots"].as_array().unwrap().len(), 7);
    assert_eq!(v["rectangle"]["fit"]["status"], "feasible");
    assert_eq!(v["distance_query"]["clamped"], false);
    assert_eq!(v["accuracy_rule"]["low_mm"], 1.0);
    let too_big = bin(&["fov", "--rect", "900", "600"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&too_big.stdout).unwrap();
    assert_eq!(v["rectangle"]["fit"]["status"], "infeasible");
    assert_eq!(code(&bin(&["fov", "--rect", "-1", "5"], dir.path())), 3);
}
