//! Exercises the C ABI through the exported extern "C" functions.

use std::ffi::{c_char, CStr, CString};

use blq_ffi::*;

const EXAMPLE_JSON: &str = r#"{
    "n": 1, "m": 1, "t0": 0.0, "T": 1.0,
    "A": [["0"]], "B": [["1/(1+w^2)"]], "C": [["0"]],
    "Q": [["0"]], "N": [["(2+w^2)/(1+w^2)"]], "R": [["(2+w^2)/(1+w^2)"]],
    "G": [["0"]], "xi": ["1"],
    "delta": 1.0, "lambda": 2.0
}"#;

const FEEDBACK_JSON: &str = r#"{
    "n": 1, "m": 1, "t0": 0.0, "T": 1.0,
    "A": [["0"]], "B": [["1"]], "C": [["0"]],
    "Q": [["0"]], "N": [["1"]], "R": [["1"]],
    "G": [["1"]], "xi": ["1"],
    "delta": 1.0, "lambda": 1.0
}"#;

fn load(json: &str) -> *mut BlqProblem {
    let text = CString::new(json).unwrap();
    let mut handle: *mut BlqProblem = std::ptr::null_mut();
    let status = unsafe { blq_problem_from_json(text.as_ptr(), &mut handle) };
    assert_eq!(status, BlqStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(blq_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

#[test]
fn parse_validate_and_dims() {
    let p = load(EXAMPLE_JSON);
    let mut n = 0usize;
    let mut m = 0usize;
    unsafe {
        assert_eq!(blq_problem_dims(p, &mut n, &mut m), BlqStatus::Ok);
        assert_eq!((n, m), (1, 1));
        assert_eq!(blq_problem_validate(p), BlqStatus::Ok);
        blq_problem_free(p);
    }
}

#[test]
fn bad_json_reports_parse_error() {
    let text = CString::new("{who knows").unwrap();
    let mut handle: *mut BlqProblem = std::ptr::null_mut();
    let status = unsafe { blq_problem_from_json(text.as_ptr(), &mut handle) };
    assert_eq!(status, BlqStatus::ParseError);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle: *mut BlqProblem = std::ptr::null_mut();
    unsafe {
        assert_eq!(
            blq_problem_from_json(std::ptr::null(), &mut handle),
            BlqStatus::NullArgument
        );
        assert_eq!(
            blq_problem_validate(std::ptr::null()),
            BlqStatus::NullArgument
        );
        let mut out = 0.0f64;
        assert_eq!(
            blq_solution_control_norm(std::ptr::null(), &mut out),
            BlqStatus::NullArgument
        );
        // Freeing null is a no-op.
        blq_problem_free(std::ptr::null_mut());
        blq_solution_free(std::ptr::null_mut());
        blq_string_free(std::ptr::null_mut());
    }
}

#[test]
fn solve_example_and_query_solution() {
    let p = load(EXAMPLE_JSON);
    let mut opts = blq_solve_options_default();
    opts.steps = 40;
    opts.paths = 2000;
    opts.degree = 3;
    let mut sol: *mut BlqSolution = std::ptr::null_mut();
    unsafe {
        assert_eq!(blq_solve(p, &opts, &mut sol), BlqStatus::Ok);
        let mut norm = f64::NAN;
        assert_eq!(blq_solution_control_norm(sol, &mut norm), BlqStatus::Ok);
        assert!(norm <= 1e-2, "control norm {norm}");
        let mut total = f64::NAN;
        let mut stderr = f64::NAN;
        assert_eq!(
            blq_solution_cost(sol, &mut total, &mut stderr),
            BlqStatus::Ok
        );
        assert!(
            total.abs() <= 3.0 * stderr + 1e-4,
            "cost {total} stderr {stderr}"
        );
        let mut steps = 0usize;
        assert_eq!(blq_solution_steps(sol, &mut steps), BlqStatus::Ok);
        assert_eq!(steps, 40);
        // Terminal Riccati slice is exactly zero.
        let mut buf = [f64::NAN; 1];
        assert_eq!(
            blq_solution_sigma_mean(sol, 40, buf.as_mut_ptr(), 1),
            BlqStatus::Ok
        );
        assert_eq!(buf[0], 0.0);
        // Interior slice is strictly positive for this instance.
        assert_eq!(
            blq_solution_sigma_mean(sol, 0, buf.as_mut_ptr(), 1),
            BlqStatus::Ok
        );
        assert!(buf[0] > 0.0);
        // Out-of-range step and short buffer are rejected.
        assert_eq!(
            blq_solution_sigma_mean(sol, 41, buf.as_mut_ptr(), 1),
            BlqStatus::ValidationError
        );
        assert_eq!(
            blq_solution_sigma_mean(sol, 0, buf.as_mut_ptr(), 0),
            BlqStatus::ValidationError
        );
        blq_solution_free(sol);
        blq_problem_free(p);
    }
}

#[test]
fn verify_clean_solution_passes() {
    let p = load(FEEDBACK_JSON);
    let mut opts = blq_solve_options_default();
    opts.steps = 40;
    opts.paths = 500;
    opts.degree = 2;
    opts.rational = false;
    let mut sol: *mut BlqSolution = std::ptr::null_mut();
    unsafe {
        assert_eq!(blq_solve(p, &opts, &mut sol), BlqStatus::Ok);
        let mut report: *mut c_char = std::ptr::null_mut();
        let status = blq_verify(sol, &mut report);
        assert_eq!(status, BlqStatus::Ok, "verify failed: {}", last_error());
        assert!(!report.is_null());
        let text = CStr::from_ptr(report).to_string_lossy().into_owned();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed["pass_stationarity"].as_bool().unwrap());
        blq_string_free(report);
        blq_solution_free(sol);
        blq_problem_free(p);
    }
}

#[test]
fn invalid_instance_fails_validation() {
    let bad = r#"{
        "n": 1, "m": 1, "t0": 0.0, "T": 1.0,
        "A": [["0"]], "B": [["1"]], "C": [["0"]],
        "Q": [["0"]], "N": [["0"]], "R": [["1"]],
        "G": [["0"]], "xi": ["1"],
        "delta": 1.0, "lambda": 1.0
    }"#;
    let p = load(bad);
    unsafe {
        assert_eq!(blq_problem_validate(p), BlqStatus::ValidationError);
        // Solving also refuses.
        let mut sol: *mut BlqSolution = std::ptr::null_mut();
        let mut opts = blq_solve_options_default();
        opts.steps = 10;
        opts.paths = 100;
        assert_eq!(blq_solve(p, &opts, &mut sol), BlqStatus::ValidationError);
        assert!(sol.is_null());
        blq_problem_free(p);
    }
}

#[test]
fn zero_control_cost_of_flat_instance() {
    // For the worked example with u = 0 the state pair is forced and the
    // cost vanishes.
    let p = load(EXAMPLE_JSON);
    let mut opts = blq_solve_options_default();
    opts.steps = 20;
    opts.paths = 1000;
    opts.degree = 3;
    let mut cost = f64::NAN;
    unsafe {
        assert_eq!(blq_zero_control_cost(p, &opts, &mut cost), BlqStatus::Ok);
        assert!(cost.abs() < 1e-8, "zero-control cost {cost}");
        blq_problem_free(p);
    }
}

/// Compile and run a small C program against the generated header and the
/// static library, proving the ABI end to end.
#[test]
fn c_smoke_test() {
    let exe = std::env::current_exe().unwrap();
    let debug_dir = exe.parent().unwrap().parent().unwrap();
    let static_lib = debug_dir.join("libblq_ffi.a");
    assert!(
        static_lib.exists(),
        "static library not found at {static_lib:?}"
    );
    let include_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include_dir.join("blq.h").exists(), "header missing");

    let dir = tempfile_dir();
    let c_src = dir.join("smoke.c");
    std::fs::write(
        &c_src,
        r#"
#include <stdio.h>
#include "blq.h"

int main(void) {
    const char *json =
        "{\"n\":1,\"m\":1,\"t0\":0.0,\"T\":1.0,"
        "\"A\":[[\"0\"]],\"B\":[[\"1\"]],\"C\":[[\"0\"]],"
        "\"Q\":[[\"0\"]],\"N\":[[\"1\"]],\"R\":[[\"1\"]],"
        "\"G\":[[\"0\"]],\"xi\":[\"1\"],\"delta\":1.0,\"lambda\":1.0}";
    BlqProblem *problem = NULL;
    if (blq_problem_from_json(json, &problem) != BLQ_STATUS_OK) return 1;
    if (blq_problem_validate(problem) != BLQ_STATUS_OK) return 2;
    BlqSolveOptions opts = blq_solve_options_default();
    opts.steps = 50;
    opts.paths = 200;
    opts.degree = 1;
    BlqSolution *sol = NULL;
    if (blq_solve(problem, &opts, &sol) != BLQ_STATUS_OK) return 3;
    double sigma0 = 0.0;
    if (blq_solution_sigma_mean(sol, 0, &sigma0, 1) != BLQ_STATUS_OK) return 4;
    /* Closed form: Sigma(0) = 1 for this instance. */
    if (sigma0 < 1.0 - 1e-8 || sigma0 > 1.0 + 1e-8) return 5;
    double norm = -1.0;
    if (blq_solution_control_norm(sol, &norm) != BLQ_STATUS_OK) return 6;
    if (norm < 0.0) return 7;
    blq_solution_free(sol);
    blq_problem_free(problem);
    printf("sigma0=%.12f norm=%.3e\n", sigma0, norm);
    return 0;
}
"#,
    )
    .unwrap();

    let binary = dir.join("smoke");
    let compile = std::process::Command::new("cc")
        .arg(&c_src)
        .arg("-I")
        .arg(&include_dir)
        .arg(static_lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&binary)
        .output()
        .expect("cc not available");
    assert!(
        compile.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );
    let run = std::process::Command::new(&binary).output().unwrap();
    assert!(
        run.status.success(),
        "smoke binary exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("sigma0=1.0000"), "{stdout}");
    let _ = std::fs::remove_dir_all(&dir);
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("blq-ffi-smoke-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn load_problem_from_file() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../problems/worked_example.json");
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut BlqProblem = std::ptr::null_mut();
    unsafe {
        assert_eq!(blq_problem_load(c_path.as_ptr(), &mut handle), BlqStatus::Ok);
        assert_eq!(blq_problem_validate(handle), BlqStatus::Ok);
        blq_problem_free(handle);
        // Missing file surfaces as an IO error with a message.
        let missing = CString::new("/nonexistent/problem.json").unwrap();
        let mut h2: *mut BlqProblem = std::ptr::null_mut();
        assert_eq!(blq_problem_load(missing.as_ptr(), &mut h2), BlqStatus::IoError);
        assert!(!last_error().is_empty());
    }
}
