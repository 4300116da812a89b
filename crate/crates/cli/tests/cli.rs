use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_falsify");
const MOCK: &str = env!("CARGO_BIN_EXE_falsify-mock-model");

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "falsify {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_is_reproducible_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&[
        "gen-synthetic",
        "--n",
        "4",
        "--style",
        "mixed",
        "--seed",
        "3",
        "--out",
        s(&d.join("data")),
    ]);
    let manifest = d.join("data/manifest.csv");
    assert_eq!(
        std::fs::read_to_string(&manifest).unwrap().lines().count(),
        13
    );

    run(&[
        "calibrate",
        "--dataset",
        s(&manifest),
        "--model",
        "builtin",
        "--out",
        s(&d.join("bounds.json")),
        "--grid",
        "6",
        "--subsample",
        "4",
    ]);
    run(&[
        "cluster",
        "--dataset",
        s(&manifest),
        "--k",
        "3",
        "--seed",
        "1",
        "--out",
        s(&d.join("clusters.csv")),
        "--features-out",
        s(&d.join("features.csv")),
    ]);
    let clusters = std::fs::read_to_string(d.join("clusters.csv")).unwrap();
    assert!(clusters.starts_with("image_id,cluster_id\n"));
    assert_eq!(clusters.lines().count(), 13);

    // same features from file give the same assignment
    run(&[
        "cluster",
        "--features",
        s(&d.join("features.csv")),
        "--k",
        "3",
        "--seed",
        "1",
        "--out",
        s(&d.join("clusters2.csv")),
    ]);
    assert_eq!(
        std::fs::read_to_string(d.join("clusters2.csv")).unwrap(),
        clusters
    );

    // paths in the config are relative to it
    std::fs::write(
        d.join("run.json"),
        r#"{
            "dataset": "data/manifest.csv",
            "model": "builtin",
            "seed": 5,
            "falsify": {
                "bounds": "bounds.json",
                "clusters": "clusters.csv",
                "budget": 36,
                "population": 6,
                "k_chain": 4,
                "subsample": 2,
                "disable": ["brightness@0", "fog"]
            }
        }"#,
    )
    .unwrap();
    let cfg = d.join("run.json");
    run(&["falsify", "--config", s(&cfg), "--out", s(&d.join("r1"))]);
    run(&["falsify", "--config", s(&cfg), "--out", s(&d.join("r2"))]);
    let a = std::fs::read_to_string(d.join("r1/report.json")).unwrap();
    assert_eq!(
        a,
        std::fs::read_to_string(d.join("r2/report.json")).unwrap()
    );
    for f in ["report.md", "usage.csv", "traces/cluster_0.csv"] {
        assert!(d.join("r1").join(f).is_file(), "{f}");
    }

    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["config"]["de"]["budget"], 36);
    assert_eq!(report["config"]["subsample"], 2);
    for c in report["clusters"].as_array().unwrap() {
        assert_eq!(c["status"], "ok");
        assert_eq!(c["evaluated_images"], 2);
        let names: Vec<&str> = c["best_chain"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["name"].as_str().unwrap())
            .collect();
        assert_eq!(names.len(), 4);
        assert!(!names.contains(&"fog"));
        if c["cluster_id"] == 0 {
            assert!(!names.contains(&"brightness"));
        }
    }

    // a flag beats the file
    run(&[
        "falsify",
        "--config",
        s(&cfg),
        "--budget",
        "12",
        "--out",
        s(&d.join("r3")),
    ]);
    let r3: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r3/report.json")).unwrap()).unwrap();
    assert_eq!(r3["config"]["de"]["budget"], 12);

    let md = String::from_utf8(run(&["report", "--in", s(&d.join("r1"))]).stdout).unwrap();
    assert!(md.contains("| gaussian_blur |"));
    let json =
        String::from_utf8(run(&["report", "--in", s(&d.join("r1")), "--format", "json"]).stdout)
            .unwrap();
    assert_eq!(json, a);
}

#[test]
fn subprocess_model_drives_a_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["gen-synthetic", "--n", "3", "--out", s(&d.join("data"))]);
    let manifest = d.join("data/manifest.csv");
    let model = format!("{MOCK} echo_rect");
    run(&[
        "calibrate",
        "--dataset",
        s(&manifest),
        "--model",
        &model,
        "--out",
        s(&d.join("b.json")),
        "--grid",
        "3",
    ]);
    run(&[
        "falsify",
        "--dataset",
        s(&manifest),
        "--model",
        &model,
        "--bounds",
        s(&d.join("b.json")),
        "--budget",
        "8",
        "--population",
        "4",
        "--out",
        s(&d.join("r")),
    ]);
    let report = std::fs::read_to_string(d.join("r/report.json")).unwrap();
    assert!(report.contains("\"status\": \"ok\""));
}

#[test]
fn usage_errors_are_reported() {
    let out = Command::new(BIN)
        .args(["falsify", "--model", "builtin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset"));

    let out = Command::new(BIN)
        .args(["falsify", "--disable", "smoke@1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("smoke"));

    let dir = tempfile::tempdir().unwrap();
    run(&["gen-synthetic", "--n", "2", "--out", s(dir.path())]);
    let out = Command::new(BIN)
        .args([
            "calibrate",
            "--dataset",
            s(&dir.path().join("manifest.csv")),
            "--out",
            "x.json",
        ])
        .args(["--model", &format!("{MOCK} echo_rect --protocol-version 9")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
