use std::fs;
use std::path::{Path, PathBuf};

use delaysync::pipeline::{
    run_scenario, verify_design, ARTIFACTS, EXIT_DESIGN_ERROR, EXIT_INPUT_ERROR, EXIT_PASS,
};
use delaysync::scenario::Scenario;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn load(name: &str) -> Scenario {
    Scenario::load(&bundled(name)).unwrap()
}

#[test]
fn bundled_scenarios_pass() {
    for name in ["chain3_static.toml", "tree4_dynamic.toml", "mixed3_hetero.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_scenario(&load(name), dir.path()).unwrap();
        assert_eq!(outcome.exit_code(), EXIT_PASS, "{name}: {}", outcome.report.to_key_value());
        for file in ARTIFACTS {
            assert!(dir.path().join(file).is_file(), "{name}: missing {file}");
        }
    }
}

#[test]
fn chain3_meets_the_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_scenario(&load("chain3_static.toml"), dir.path()).unwrap();
    assert!(outcome.report.terminal_error < 1e-3);
    let states = fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert!(states.starts_with("t,agent,state_index,value\n"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let s = load("mixed3_hetero.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_scenario(&s, a.path()).unwrap();
    run_scenario(&s, b.path()).unwrap();
    for file in ARTIFACTS {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn bound_violation_is_an_input_error() {
    let mut s = load("chain3_static.toml");
    s.bounds.beta = 1.5;
    let err = run_scenario(&s, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_INPUT_ERROR);
    assert!(err.to_string().contains("outside"), "{err}");
}

#[test]
fn unstable_agent_is_a_design_error() {
    let mut s = load("chain3_static.toml");
    s.agents[0].a = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
    let err = run_scenario(&s, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_DESIGN_ERROR);
    assert!(err.to_string().contains("assumption violated"), "{err}");
}

#[test]
fn verify_reports_certificates() {
    let v = verify_design(&load("chain3_static.toml")).unwrap();
    assert!(v.passed);
    assert!(v.certificates.iter().all(|c| c.abscissa < 0.0));

    let v = verify_design(&load("tree4_dynamic.toml")).unwrap();
    assert!(v.text.contains("delta = "));
    assert!(v.text.contains("grid l = 1.0000000000000000e0"));

    let v = verify_design(&load("mixed3_hetero.toml")).unwrap();
    assert!(v.text.contains("epsilon = "));
    assert!(v.text.contains("regulator residuals"));
}

#[test]
fn bundled_scenarios_round_trip() {
    for name in ["chain3_static.toml", "tree4_dynamic.toml", "mixed3_hetero.toml"] {
        let s = load(name);
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }
}
