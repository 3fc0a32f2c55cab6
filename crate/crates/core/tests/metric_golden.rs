use std::path::PathBuf;

use vigil_core::metrics::GoldenCase;

fn case(name: &str) -> GoldenCase {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics").join(name);
    GoldenCase::load(&path).unwrap()
}

fn check(name: &str) -> vigil_core::metrics::MetricReport {
    let c = case(name);
    let got = c.evaluate().unwrap();
    assert!(got.agrees_with(&c.expected, 1e-9), "{name}:\n{got:#?}\nexpected\n{:#?}", c.expected);
    got
}

#[test]
fn time_diff_case() {
    assert_eq!(check("time_diff.json").time_diff_seconds, Some(1.5));
}

#[test]
fn weighted_f1_case() {
    let r = check("weighted_f1.json");
    assert!((r.weighted_f1_pct.unwrap() - 66.67).abs() < 0.005);
}

#[test]
fn aat_case() {
    assert_eq!(check("aat.json").aat_seconds, Some(7.5));
}

#[test]
fn fluency_case() {
    assert!((check("fluency.json").fluency_pct.unwrap() - 70.0).abs() < 1e-12);
}

#[test]
fn reports_are_deterministic() {
    let c = case("weighted_f1.json");
    let a = serde_json::to_string(&c.evaluate().unwrap()).unwrap();
    let b = serde_json::to_string(&c.evaluate().unwrap()).unwrap();
    assert_eq!(a, b);
}
