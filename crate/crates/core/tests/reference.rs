//! Classical WLW against a frozen fit from an independent Cox
//! implementation (fixtures/reference_cox.py).

mod common;

use mewlw_core::data::Role;
use mewlw_core::wlw_standard::{fit_wlw, OutcomeSource};
use mewlw_core::Ties;

#[test]
fn efron_fit_matches_external_reference() {
    let data = common::load("reference_study.csv", Role::Validation);
    let text = std::fs::read_to_string(common::fixture("reference_cox.json")).unwrap();
    let reference: serde_json::Value = serde_json::from_str(&text).unwrap();
    let beta: Vec<f64> = serde_json::from_value(reference["beta"].clone()).unwrap();
    let cov: Vec<Vec<f64>> = serde_json::from_value(reference["cov"].clone()).unwrap();

    let fit = fit_wlw(&data, Ties::Efron, OutcomeSource::TrueStatus).unwrap();
    let ours = fit.beta();
    assert_eq!(ours.len(), beta.len());
    for (a, b) in ours.iter().zip(&beta) {
        assert!((a - b).abs() < 1e-6, "beta {a} vs {b}");
    }
    for (i, row) in cov.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let rel = (fit.cov[(i, j)] - v).abs() / fit.cov[(i, i)].max(fit.cov[(j, j)]);
            assert!(rel < 1e-6, "cov[{i},{j}] {} vs {v}", fit.cov[(i, j)]);
        }
    }
}
