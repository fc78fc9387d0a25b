use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// Cheaper than the desk defaults; every subcommand finishes in seconds.
const QUICK: [&str; 6] = [
    "--set",
    "truncation.n_max=6",
    "--set",
    "sampling.budget=4000",
    "--set",
    "density.n_terms=8",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bkthermo"))
        .arg("--out")
        .arg(dir)
        .args(QUICK)
        .args(args)
        .env_remove("BKTHERMO_OUT")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_writes_a_report_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&dir.path().join("verify.json"));
    let entries = summary.as_array().unwrap();
    assert_eq!(entries.len(), 8);
    let reports: Vec<_> = std::fs::read_dir(dir.path().join("verify"))
        .unwrap()
        .collect();
    assert_eq!(reports.len(), entries.len());
    let first = json(&dir.path().join("verify/00_preimage_enumeration.json"));
    for key in [
        "lemma_id",
        "samples",
        "fitted_constants",
        "tolerance",
        "verdict",
        "provenance",
    ] {
        assert!(first.get(key).is_some(), "{key} missing");
    }
}

#[test]
fn pressure_is_byte_identical_across_runs_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(a.path(), &["--threads", "1", "pressure"])
        .status
        .success());
    assert!(run(b.path(), &["--threads", "3", "pressure"])
        .status
        .success());
    for f in ["pressure.csv", "pressure.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let est = json(&a.path().join("pressure.json"));
    assert!(est["value"].as_f64().unwrap() < 0.0);
}

#[test]
fn gibbs_without_inputs_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gibbs"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cloud.csv"), "{stderr}");
    let err = json(&dir.path().join("error.json"));
    assert_eq!(err["kind"], "missing_input");
}

#[test]
fn gibbs_reads_inputs_from_another_directory() {
    let (inputs, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(inputs.path(), &["density"]).status.success());
    assert!(run(inputs.path(), &["conformal"]).status.success());
    let from = inputs.path().to_str().unwrap();
    let res = run(out.path(), &["gibbs", "--from", from]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let g = json(&out.path().join("gibbs.json"));
    assert!(
        g["invariance_residual"].as_f64().unwrap()
            < g["conformal_invariance_residual"].as_f64().unwrap()
    );
    let manifest = json(&out.path().join("manifest-gibbs.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn inadmissible_config_exits_2_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--set", "potential.t=1.5", "pressure"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("potential.t"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[potential]\ntau = 1.5\nbeta = 2.0\n").unwrap();
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "pressure"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bkthermo"))
        .args(QUICK)
        .args(["--set", "output.formats=[\"json\"]", "sample-julia"])
        .env("BKTHERMO_OUT", dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("cloud.json").is_file());
    assert!(!dir.path().join("cloud.csv").exists());
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["pressure"]).status.success());
    let manifest = dir.path().join("manifest-pressure.json");
    let replay = |m: &Path| {
        Command::new(env!("CARGO_BIN_EXE_bkthermo"))
            .arg("replay")
            .arg(m)
            .output()
            .unwrap()
    };
    let out = replay(&manifest);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let mut m = json(&manifest);
    m["outputs"][0]["sha256"] = Value::from("0".repeat(64));
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, serde_json::to_string(&m).unwrap()).unwrap();
    let out = replay(&tampered);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay_mismatch"));
}

#[test]
fn dimension_reports_an_unbracketed_root_as_experimental() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dimension"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rep = json(&dir.path().join("dimension.json"));
    assert_eq!(rep["experimental"], true);
    assert_eq!(rep["result"]["kind"], "not_bracketed");
}

#[test]
fn node_budget_exhaustion_exits_3_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["--set", "truncation.node_budget=200", "pressure"],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let diag = json(&dir.path().join("diagnostics.json"));
    assert_eq!(diag["kind"], "non_convergence");
    assert_eq!(diag["node_budget"]["budget"], 200);
}
