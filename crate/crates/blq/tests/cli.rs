//! End-to-end tests of the command-line interface: exit codes, artifact
//! layout, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;

fn blq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blq"))
}

fn problems() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../problems")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn solve_writes_artifacts_and_matches_closed_form() {
    let out = tempfile::tempdir().unwrap();
    let status = blq()
        .args([
            "solve",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--steps",
            "100",
            "--paths",
            "200",
            "--out",
            out.path().to_str().unwrap(),
            "--dump-paths",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    for name in [
        "Sigma.csv",
        "control.csv",
        "triple.csv",
        "report.json",
        "paths.csv",
    ] {
        assert!(out.path().join(name).exists(), "missing {name}");
    }
    let sigma = read(out.path(), "Sigma.csv");
    let mut lines = sigma.lines();
    let comment = lines.next().unwrap();
    assert!(
        comment.starts_with("# config_hash=") && comment.contains("seed=1"),
        "{comment}"
    );
    assert_eq!(lines.next().unwrap(), "k,t,Sigma_11,Lambda_11");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let t: f64 = cols[1].parse().unwrap();
        let sig: f64 = cols[2].parse().unwrap();
        assert!((sig - (1.0 - t)).abs() <= 1e-8, "Sigma({t}) = {sig}");
    }

    let report: serde_json::Value = serde_json::from_str(&read(out.path(), "report.json")).unwrap();
    assert_eq!(report["route"], "ode");
    assert!(report["assumptions"]["h3_ok"].as_bool().unwrap());
}

#[test]
fn identical_configs_give_byte_identical_artifacts() {
    let run = |dir: &Path| {
        let status = blq()
            .args([
                "solve",
                problems().join("worked_example.json").to_str().unwrap(),
                "--steps",
                "20",
                "--paths",
                "300",
                "--seed",
                "7",
                "--out",
                dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    for name in ["Sigma.csv", "control.csv", "triple.csv", "report.json"] {
        let left = std::fs::read(a.path().join(name)).unwrap();
        let right = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
    // A different seed changes the artifacts.
    let c = tempfile::tempdir().unwrap();
    let status = blq()
        .args([
            "solve",
            problems().join("worked_example.json").to_str().unwrap(),
            "--steps",
            "20",
            "--paths",
            "300",
            "--seed",
            "8",
            "--out",
            c.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(
        std::fs::read(a.path().join("triple.csv")).unwrap(),
        std::fs::read(c.path().join("triple.csv")).unwrap()
    );
}

#[test]
fn malformed_problem_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let output = blq()
        .args([
            "solve",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error"), "{stderr}");
}

#[test]
fn invalid_assumptions_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("zero_n.json");
    std::fs::write(
        &bad,
        r#"{
            "n": 1, "m": 1, "t0": 0.0, "T": 1.0,
            "A": [["0"]], "B": [["1"]], "C": [["0"]],
            "Q": [["0"]], "N": [["0"]], "R": [["1"]],
            "G": [["0"]], "xi": ["1"],
            "delta": 1.0, "lambda": 1.0
        }"#,
    )
    .unwrap();
    let output = blq()
        .args([
            "validate",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    // Solve also refuses.
    let output = blq()
        .args([
            "solve",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("o2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn verify_clean_passes_and_defects_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let problem = problems().join("scalar_feedback.json");
    let base = [
        "verify",
        problem.to_str().unwrap(),
        "--steps",
        "40",
        "--paths",
        "500",
        "--oracle-steps",
        "10",
        "--oracle-paths",
        "100",
    ];
    let status = blq()
        .args(base)
        .args(["--out", dir.path().join("clean").to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("clean"), "verify_report.json")).unwrap();
    assert!(report["overall_pass"].as_bool().unwrap());

    for defect in ["control", "state"] {
        let out_dir = dir.path().join(defect);
        let status = blq()
            .args(base)
            .args([
                "--inject-defect",
                defect,
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(4), "defect {defect}");
        // The report is still written on failure.
        let report: serde_json::Value =
            serde_json::from_str(&read(&out_dir, "verify_report.json")).unwrap();
        assert!(!report["overall_pass"].as_bool().unwrap());
    }
}

#[test]
fn eps_study_table_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let status = blq()
        .args([
            "eps-study",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--steps",
            "400",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let table: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "eps_table.json")).unwrap();
    let diffs = table["sup_diffs"].as_array().unwrap();
    let expected = [0.9, 0.09, 0.009];
    for (d, e) in diffs.iter().zip(expected.iter()) {
        assert!((d.as_f64().unwrap() - e).abs() <= 1e-8);
    }
    assert!(table["all_monotone"].as_bool().unwrap());

    let output = blq()
        .args([
            "eps-study",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--eps",
            "0.5",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn validate_reports_example_assumptions() {
    let dir = tempfile::tempdir().unwrap();
    let output = blq()
        .args([
            "validate",
            problems().join("worked_example.json").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "assumptions.json")).unwrap();
    assert!(report["h1_ok"].as_bool().unwrap());
    assert!(report["h2_ok"].as_bool().unwrap());
    assert!(report["h3_ok"].as_bool().unwrap());
    let min_n = report["observed_min_eig_n"].as_f64().unwrap();
    assert!(min_n > 1.0 && min_n < 1.1, "min eig N {min_n}");
}

#[test]
fn route_forcing_and_eps_route() {
    let dir = tempfile::tempdir().unwrap();
    // ode route on a w-dependent instance is refused.
    let output = blq()
        .args([
            "solve",
            problems().join("worked_example.json").to_str().unwrap(),
            "--route",
            "ode",
            "--steps",
            "10",
            "--paths",
            "100",
            "--out",
            dir.path().join("a").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("route"));

    // Unknown route name is refused.
    let output = blq()
        .args([
            "solve",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--route",
            "newton",
            "--out",
            dir.path().join("b").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    // The eps route solves the scalar instance; Sigma tracks eps_min + 1 - t.
    let out_dir = dir.path().join("eps");
    let status = blq()
        .args([
            "solve",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--route",
            "eps",
            "--steps",
            "200",
            "--paths",
            "100",
            "--eps",
            "0.1,0.01,0.001",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let sigma = read(&out_dir, "Sigma.csv");
    for line in sigma.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        let t: f64 = cols[1].parse().unwrap();
        let sig: f64 = cols[2].parse().unwrap();
        assert!((sig - (1.001 - t)).abs() <= 1e-8, "eps-route Sigma({t}) = {sig}");
    }
    let report: serde_json::Value = serde_json::from_str(&read(&out_dir, "report.json")).unwrap();
    assert_eq!(report["route"], "eps");
}

#[test]
fn markov_route_can_be_forced_on_deterministic_instances() {
    let dir = tempfile::tempdir().unwrap();
    let status = blq()
        .args([
            "solve",
            problems().join("scalar_t_minus_s.json").to_str().unwrap(),
            "--route",
            "markov",
            "--steps",
            "50",
            "--paths",
            "300",
            "--degree",
            "2",
            "--no-rational",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "report.json")).unwrap();
    assert_eq!(report["route"], "markov");
    // The regression route reproduces the closed form to first order.
    let sigma = read(dir.path(), "Sigma.csv");
    let first_path_rows = sigma.lines().skip(2).take(51);
    for line in first_path_rows {
        let cols: Vec<&str> = line.split(',').collect();
        let t: f64 = cols[2].parse().unwrap();
        let sig: f64 = cols[3].parse().unwrap();
        assert!((sig - (1.0 - t)).abs() <= 5e-2, "markov Sigma({t}) = {sig}");
    }
}
