mod common;

use mewlw_core::data::{Role, Time};
use mewlw_core::weights::{build_weight_table, degenerate_weight_table};
use mewlw_core::wlw_standard::{fit_wlw, OutcomeSource};
use mewlw_core::wlw_weighted::{
    evaluate, fit_weighted, score_jacobian, solve_weighted, weighted_score_breslow, weighted_score_efron,
    RiskEntry, RiskPanel, TimeSlice,
};
use mewlw_core::Ties;
use nalgebra::DVector;
use proptest::prelude::*;

use common::{load, simulated, standard_me};

type RawEntry = (f64, f64, f64, f64);

fn panel_from(slices: Vec<Vec<RawEntry>>, single_event: bool) -> RiskPanel {
    let mut subject = 0;
    let slices = slices
        .into_iter()
        .enumerate()
        .map(|(t, raw)| {
            let entries: Vec<RiskEntry> = raw
                .into_iter()
                .enumerate()
                .map(|(j, (y, h, z1, z2))| {
                    // at most one subject per slice carries mass when asked
                    let h = if single_event && j > 0 { 0.0 } else { h };
                    subject += 1;
                    RiskEntry {
                        subject: subject - 1,
                        y_tilde: y,
                        hazard: h,
                        weight: h * y,
                        z: DVector::from_vec(vec![z1, z2]),
                        d_y_tilde: None,
                        d_hazard: None,
                        d_weight: None,
                    }
                })
                .collect();
            let ties = entries.iter().filter(|e| e.weight > 0.0).count();
            let total_weight = entries.iter().map(|e| e.weight).sum();
            TimeSlice { time: Time(t as i64 + 1), entries, ties, total_weight }
        })
        .collect();
    RiskPanel { event: 0, n_subjects: subject, dim: 2, gamma_dim: 0, slices }
}

fn raw_slices() -> impl Strategy<Value = Vec<Vec<RawEntry>>> {
    let entry = (0.05f64..=1.0, 0.0f64..=1.0, -2.0f64..2.0, -2.0f64..2.0);
    prop::collection::vec(prop::collection::vec(entry, 1..6), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn efron_equals_breslow_without_ties(raw in raw_slices(), b1 in -1.0f64..1.0, b2 in -1.0f64..1.0) {
        let panel = panel_from(raw, true);
        let beta = DVector::from_vec(vec![b1, b2]);
        let e = weighted_score_efron(&panel, &beta).score;
        let b = weighted_score_breslow(&panel, &beta).score;
        prop_assert!((e - b).amax() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_concave(raw in raw_slices(), b1 in -2.0f64..2.0, b2 in -2.0f64..2.0, efron in any::<bool>()) {
        let panel = panel_from(raw, false);
        let ties = if efron { Ties::Efron } else { Ties::Breslow };
        let jac = score_jacobian(&panel, &DVector::from_vec(vec![b1, b2]), ties);
        let eig = jac.symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l < 1e-10), "eigenvalues {}", eig.eigenvalues);
    }

    #[test]
    fn score_is_the_loglik_gradient(raw in raw_slices(), b1 in -1.0f64..1.0, b2 in -1.0f64..1.0, efron in any::<bool>()) {
        let panel = panel_from(raw, false);
        let ties = if efron { Ties::Efron } else { Ties::Breslow };
        let beta = DVector::from_vec(vec![b1, b2]);
        let eval = evaluate(&panel, &beta, ties, false);
        let h = 1e-6;
        for c in 0..2 {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[c] += h;
            down[c] -= h;
            let fd = (evaluate(&panel, &up, ties, false).loglik - evaluate(&panel, &down, ties, false).loglik) / (2.0 * h);
            prop_assert!((fd - eval.score[c]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn solver_reaches_a_stationary_point() {
    let main = load("evs_main.csv", Role::Main);
    let me = standard_me(&load("evs_valid.csv", Role::Validation));
    let table = build_weight_table(&main, &me, false).unwrap();
    for ties in [Ties::Breslow, Ties::Efron] {
        let (panels, fits) = fit_weighted(&main, &table, ties).unwrap();
        for (panel, fit) in panels.iter().zip(&fits) {
            assert!(fit.converged);
            let u = weighted_score_efron(panel, &DVector::from_vec(fit.beta.clone()));
            if ties == Ties::Efron {
                assert!(u.score.amax() < 1e-8);
            }
            // a different start lands on the same root
            let again = solve_weighted(panel, ties, &DVector::from_element(1, 1.5)).unwrap();
            assert!((again.beta[0] - fit.beta[0]).abs() < 1e-8);
        }
    }
}

#[test]
fn covariate_rescaling_rescales_coefficients() {
    let data = simulated(200, 21, Role::Validation);
    let mut scaled = data.clone();
    for s in &mut scaled.subjects {
        for e in &mut s.events {
            for z in &mut e.covariates {
                z[0] *= 2.5;
            }
        }
    }
    // z is also an error-model predictor; its coefficient rescales too
    let me = standard_me(&data);
    let me_scaled = standard_me(&scaled);
    for ties in [Ties::Breslow, Ties::Efron] {
        let (_, a) = fit_weighted(&data, &build_weight_table(&data, &me, false).unwrap(), ties).unwrap();
        let (_, b) = fit_weighted(&scaled, &build_weight_table(&scaled, &me_scaled, false).unwrap(), ties).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.beta[0] - 2.5 * y.beta[0]).abs() < 1e-7, "{} vs {}", x.beta[0], 2.5 * y.beta[0]);
        }
    }
}

#[test]
fn degenerate_weights_reproduce_tied_standard_fit() {
    // integer grid times make heavy ties, which is where Efron and Breslow differ
    let data = simulated(300, 4, Role::Validation);
    let table = degenerate_weight_table(&data).unwrap();
    let (_, breslow) = fit_weighted(&data, &table, Ties::Breslow).unwrap();
    let (_, efron) = fit_weighted(&data, &table, Ties::Efron).unwrap();
    assert!((breslow[0].beta[0] - efron[0].beta[0]).abs() > 1e-4);
    for (ties, weighted) in [(Ties::Breslow, breslow), (Ties::Efron, efron)] {
        let standard = fit_wlw(&data, ties, OutcomeSource::TrueStatus).unwrap();
        for (w, s) in weighted.iter().zip(&standard.events) {
            assert!((w.beta[0] - s.beta[0]).abs() < 1e-9);
            assert!((w.loglik - s.loglik).abs() < 1e-8);
        }
    }
}

#[test]
fn zero_weights_are_degenerate() {
    let data = simulated(20, 2, Role::Validation);
    let mut none = data.clone();
    for s in &mut none.subjects {
        for e in &mut s.events {
            e.true_status = Some(vec![false; e.grid.len()]);
        }
    }
    let table = degenerate_weight_table(&none).unwrap();
    let err = fit_weighted(&none, &table, Ties::Efron).unwrap_err();
    assert!(err.is_numerical());
}
