//! 30 hand-picked EM/F1 cases whose expected values were produced by
//! `fixtures/metrics_oracle.py`, an independent reimplementation.

use cocoa_core::metrics::{exact_match, f1_score, summarize, EvalRow};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    prediction: String,
    golds: Vec<String>,
    em: u8,
    f1: f64,
}

fn cases() -> Vec<Case> {
    let raw = include_str!("fixtures/metrics_cases.json");
    serde_json::from_str(raw).unwrap()
}

#[test]
fn fixture_matches_oracle() {
    let cases = cases();
    assert_eq!(cases.len(), 30);
    for c in &cases {
        assert_eq!(exact_match(&c.prediction, &c.golds).unwrap(), c.em, "EM {:?} vs {:?}", c.prediction, c.golds);
        let f1 = f1_score(&c.prediction, &c.golds).unwrap();
        assert!((f1 - c.f1).abs() < 5e-5, "F1 {:?} vs {:?}: {f1} != {}", c.prediction, c.golds, c.f1);
    }
}

#[test]
fn three_row_means() {
    // em {1,0,1} -> 66.666..; f1 {1.0, 0.25, 0.4} -> 55.0; avg 60.8333..
    let row = |id: &str, em: u8, f1: f64| EvalRow {
        query_id: id.into(),
        prediction: String::new(),
        em,
        f1,
        failed: false,
    };
    let rep = summarize("toy".into(), None, vec![row("a", 1, 1.0), row("b", 0, 0.25), row("c", 1, 0.4)]);
    assert!((rep.em_mean - 200.0 / 3.0).abs() < 1e-9);
    assert!((rep.f1_mean - 55.0).abs() < 1e-9);
    assert!((rep.avg - (200.0 / 3.0 + 55.0) / 2.0).abs() < 1e-9);
    let json = serde_json::to_value(&rep).unwrap();
    assert_eq!(json["em_mean"], 66.67);
    assert_eq!(json["f1_mean"], 55.0);
    assert_eq!(json["avg"], 60.83);
}
