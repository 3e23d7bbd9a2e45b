use std::path::Path;
use std::process::{Command, Output};

fn lighten(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lighten"))
        .arg("--out")
        .arg(out)
        .args(args)
        .args([
            "--decomposition.iters",
            "6",
            "--decomposition.adapt_steps=10",
        ])
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = lighten(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-toy"]);
    ok(dir.path(), &["calibrate"]);
    dir
}

#[test]
fn full_flow() {
    let dir = prepared();
    let p = dir.path();
    let text = ok(p, &["compress", "--targets.alpha", "0.3"]);
    assert!(text.starts_with("psi "));
    let sim = ok(p, &["simulate", "--compare", "--hardware.batch_tokens=16"]);
    assert!(sim.contains("edp_pj_s"));
    for f in [
        "report.json",
        "report.csv",
        "comparison.json",
        "baseline_report.json",
    ] {
        assert!(p.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(p.join("report.csv")).unwrap();
    assert!(csv.starts_with("layer,component,energy_pj\n"));
    let verify = ok(p, &["verify"]);
    assert!(!verify.contains("FAIL"), "{verify}");
    ok(p, &["report"]);
    assert!(p.join("summary.md").exists());
}

#[test]
fn exit_codes() {
    let dir = prepared();
    let p = dir.path();
    assert_eq!(
        lighten(p, &["compress", "--targets.alpha", "0.999"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        lighten(p, &["compress", "--targets.nope", "1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        lighten(p, &["compress", "--targets.alpha", "1.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(lighten(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        lighten(p, &["simulate"]).status.code(),
        Some(2),
        "no plan yet"
    );
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(lighten(empty.path(), &["compress"]).status.code(), Some(2));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"targets": {"alpha": 0.45}, "seed": 11}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lighten"))
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "show-config",
            "--targets.granularity",
            "8",
        ])
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["targets"]["alpha"], 0.45);
    assert_eq!(v["targets"]["granularity"], 8);
    assert_eq!(v["seed"], 11);
}

#[test]
fn same_seed_same_bytes() {
    let a = prepared();
    let b = prepared();
    ok(a.path(), &["compress"]);
    ok(b.path(), &["compress"]);
    for f in ["plan.json", "compressed.lten"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}
