mod common;

use mewlw_core::me_model::expit;
use mewlw_core::sim::{
    gen_self_report, gumbel_cdf, gumbel_sample, run_replicate, run_simulation, sens_spec_to_alpha, summarize,
    write_summary_csv, MethodEstimate, ReplicateResult, SimConfig, SimDesign,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn empirical_cdf(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&x| x <= t) as f64 / sorted.len() as f64
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().chain(b.iter()).fold(0.0f64, |d, &t| d.max((empirical_cdf(a, t) - empirical_cdf(b, t)).abs()))
}

#[test]
fn gumbel_marginals_are_exponential() {
    let n = 50_000;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (l1, l2) = (0.4, 1.3);
    let (mut t1, mut t2): (Vec<f64>, Vec<f64>) = (0..n).map(|_| gumbel_sample(0.8, l1, l2, &mut rng)).unzip();
    // independent draws from a plain inverse-CDF exponential sampler
    let mut e1: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() / l1).collect();
    let mut e2: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() / l2).collect();
    // critical value at the 0.1% level
    let critical = 1.95 * (2.0 / n as f64).sqrt();
    assert!(ks(&mut t1, &mut e1) < critical);
    assert!(ks(&mut t2, &mut e2) < critical);
    assert!((t1.iter().sum::<f64>() / n as f64 - 1.0 / l1).abs() < 0.05 / l1);
}

#[test]
fn gumbel_cdf_limits() {
    assert_eq!(gumbel_cdf(0.5, 1.0, 1.0, 0.0, 3.0), 0.0);
    let f1 = 1.0 - (-2.0f64).exp();
    let f2 = 1.0 - (-1.5f64).exp();
    assert!((gumbel_cdf(0.0, 1.0, 0.5, 2.0, 3.0) - f1 * f2).abs() < 1e-15);
    assert!((gumbel_cdf(1.0, 1.0, 1.0, 60.0, 60.0) - 1.0).abs() < 1e-12);
}

#[test]
fn false_reports_accumulate_over_visits() {
    let (a0, a1) = sens_spec_to_alpha(0.9, 0.9);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let n = 100_000;
    let ever = (0..n).filter(|_| *gen_self_report(&[false; 4], a0, a1, &mut rng).last().unwrap()).count();
    let expected = 1.0 - 0.9f64.powi(4);
    assert!((expected - 0.3439).abs() < 1e-12);
    assert!((ever as f64 / n as f64 - expected).abs() < 0.005);
}

#[test]
fn reports_are_monotone_with_the_right_conditional_rates() {
    let (a0, a1) = sens_spec_to_alpha(0.85, 0.7);
    assert!((expit(a0) - 0.3).abs() < 1e-12);
    assert!((expit(a0 + a1) - 0.85).abs() < 1e-12);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    // (at risk, reported) counts by true status for the first report
    let mut counts = [[0usize; 2]; 2];
    for _ in 0..100_000 {
        let onset = rng.random_range(0..6);
        let truth: Vec<bool> = (0..5).map(|j| j >= onset).collect();
        let reports = gen_self_report(&truth, a0, a1, &mut rng);
        assert!(reports.windows(2).all(|w| w[0] <= w[1]));
        for (j, &d) in truth.iter().enumerate() {
            if j > 0 && reports[j - 1] {
                break;
            }
            counts[d as usize][0] += 1;
            counts[d as usize][1] += reports[j] as usize;
        }
    }
    let rate = |c: [usize; 2]| c[1] as f64 / c[0] as f64;
    assert!((rate(counts[0]) - 0.3).abs() < 0.01);
    assert!((rate(counts[1]) - 0.85).abs() < 0.01);
}

fn result(index: usize, betas: [f64; 2], se: f64) -> ReplicateResult {
    ReplicateResult {
        index,
        estimates: vec![MethodEstimate { method: "corrected".into(), beta: betas.to_vec(), se: vec![se, se] }],
        error: None,
    }
}

#[test]
fn summary_arithmetic() {
    let results = vec![
        result(2, [0.6, 1.0], 0.1),
        result(0, [0.4, 1.2], 0.2),
        ReplicateResult { index: 1, estimates: vec![], error: Some("failed".into()) },
        result(3, [0.5, 0.3], 0.3),
    ];
    let s = summarize(&results, &[0.5, 1.0]).unwrap();
    assert_eq!((s.n_success, s.n_failed), (3, 1));
    let r = s.row("corrected", 1).unwrap();
    assert!((r.mean - 0.5).abs() < 1e-15);
    assert!(r.pct_bias.abs() < 1e-12);
    assert!((r.emp_se - 0.1).abs() < 1e-12);
    assert!((r.model_se - 0.2).abs() < 1e-12);
    // |0.6-0.5| <= 1.96*0.1, |0.4-0.5| <= 1.96*0.2, 0 <= 1.96*0.3
    assert_eq!(r.coverage, 1.0);
    let r = s.row("corrected", 2).unwrap();
    assert!((r.mean - 2.5 / 3.0).abs() < 1e-12);
    assert!((r.pct_bias + 100.0 / 6.0).abs() < 1e-9);
    assert!((r.emp_se - 0.47258156262526085).abs() < 1e-12);
    // the last replicate misses: 0.7 > 1.96 * 0.3
    assert!((r.coverage - 2.0 / 3.0).abs() < 1e-12);

    let mut out = Vec::new();
    write_summary_csv(&s, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,param,true,mean,pct_bias,emp_se,model_se,coverage");
    assert_eq!(text.lines().count(), 3);

    let all_failed = vec![ReplicateResult { index: 0, estimates: vec![], error: Some("x".into()) }];
    assert!(summarize(&all_failed, &[0.5, 1.0]).is_err());
}

#[test]
fn config_parsing() {
    let text = std::fs::read_to_string(common::fixture("evs_reference.cfg")).unwrap();
    let c = SimConfig::parse(&text).unwrap();
    assert_eq!(c.design, SimDesign::Evs);
    assert_eq!((c.n_main, c.n_valid), (1000, 100));
    assert!((c.beta[1] - 1.5f64.ln()).abs() < 1e-15);
    assert!((c.lambda[0] - 1.0 / 7.0).abs() < 1e-15);
    assert!(SimConfig::parse("n_main = 10\nn_main = 20").is_err());
    assert!(SimConfig::parse("rho = 0.1\nn_valid = 50").is_err());
    assert!(SimConfig::parse("bogus = 1").is_err());
    assert!(SimConfig::parse("sens = 1.5").and_then(|c| c.validate()).is_err());
}

#[test]
fn replicates_are_reproducible_and_independent() {
    let config = SimConfig { n_main: 300, n_valid: 60, replicates: 3, seed: 11, ..SimConfig::default() };
    let a = run_replicate(&config, 1);
    assert_eq!(a, run_replicate(&config, 1));
    assert_ne!(a, run_replicate(&config, 2));
    let all = run_simulation(&config).unwrap();
    assert_eq!(all[1], a);
    assert!(all.iter().map(|r| r.index).eq(0..3));
}

/// Short version of the external-design reproduction with a wider band.
#[test]
fn external_design_smoke() {
    let text = std::fs::read_to_string(common::fixture("evs_reference.cfg")).unwrap();
    let config = SimConfig { replicates: 100, ..SimConfig::parse(&text).unwrap() };
    let s = summarize(&run_simulation(&config).unwrap(), &config.beta).unwrap();
    for (j, (corrected, naive)) in [(-0.43, -32.5), (0.93, -31.1)].into_iter().enumerate() {
        let c = s.row("corrected", j + 1).unwrap();
        let n = s.row("naive", j + 1).unwrap();
        assert!((c.pct_bias - corrected).abs() <= 8.0, "corrected {}", c.pct_bias);
        assert!((n.pct_bias - naive).abs() <= 8.0, "naive {}", n.pct_bias);
    }
    assert_eq!(s.rows.len(), 8);
}
