//! Classical WLW marginal Cox fit on observed (error-free or naive) outcomes
//! with the Lin-Wei robust covariance across event types.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{EventPath, StudyDataset, Time};
use crate::error::{Error, Result};
use crate::linalg;
use crate::Ties;

/// Which indicator path defines the observed event.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    TrueStatus,
    /// The naive analysis: self-reports taken at face value.
    SelfReport,
}

/// Point estimate for one event type.
#[derive(Clone, Debug, Serialize)]
pub struct EventFit {
    pub event: usize,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub loglik: f64,
}

/// Estimates for all event types with the stacked covariance.
#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    pub ties: Ties,
    pub n_subjects: usize,
    pub events: Vec<EventFit>,
    #[serde(skip)]
    pub cov: DMatrix<f64>,
    /// Inverse of the (unnormalized) block-diagonal information.
    #[serde(skip)]
    pub bread: DMatrix<f64>,
    /// Score residuals, one stacked vector per subject.
    #[serde(skip)]
    pub residuals: Vec<DVector<f64>>,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.events.iter().map(|e| e.beta.len()).sum(),
            self.events.iter().flat_map(|e| e.beta.iter().copied()),
        )
    }

    pub fn se(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Observed time and status of one subject.
struct Observed<'a> {
    path: &'a EventPath,
    time: Time,
    event: bool,
}

fn observe<'a>(path: &'a EventPath, source: OutcomeSource) -> Result<Observed<'a>> {
    let first = match source {
        OutcomeSource::TrueStatus => {
            if path.true_status.is_none() {
                return Err(Error::Invalid("true-status outcome requested but not recorded".into()));
            }
            path.first_true_event()
        }
        OutcomeSource::SelfReport => path.first_report(),
    };
    Ok(match first {
        Some(j) => Observed { path, time: path.times()[j], event: true },
        // A subject censored before its first questionnaire still sits in
        // the risk sets up to C.
        None => Observed { path, time: path.censor, event: false },
    })
}

/// Risk-set data of one event time.
struct Stratum {
    /// (subject, covariates at t, is an event here)
    members: Vec<(usize, DVector<f64>, bool)>,
    deaths: usize,
}

fn strata(obs: &[Observed<'_>]) -> Vec<(Time, Stratum)> {
    let mut times: Vec<Time> = obs.iter().filter(|o| o.event).map(|o| o.time).collect();
    times.sort_unstable();
    times.dedup();
    times
        .into_iter()
        .map(|t| {
            let members: Vec<_> = obs
                .iter()
                .enumerate()
                .filter(|(_, o)| o.time >= t)
                .map(|(i, o)| {
                    (i, DVector::from_column_slice(o.path.covariates_at(t)), o.event && o.time == t)
                })
                .collect();
            let deaths = members.iter().filter(|m| m.2).count();
            (t, Stratum { members, deaths })
        })
        .collect()
}

struct Eval {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate(strata: &[(Time, Stratum)], beta: &DVector<f64>, ties: Ties) -> Eval {
    let p = beta.len();
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (_, s) in strata {
        let (mut r0, mut r1, mut r2) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
        let (mut d0, mut d1, mut d2) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
        for (_, z, dies) in &s.members {
            let e = z.dot(beta).exp();
            r0 += e;
            r1.axpy(e, z, 1.0);
            r2.ger(e, z, z, 1.0);
            if *dies {
                loglik += z.dot(beta);
                score += z;
                d0 += e;
                d1.axpy(e, z, 1.0);
                d2.ger(e, z, z, 1.0);
            }
        }
        let d = s.deaths as f64;
        let parts: Vec<f64> = match ties {
            Ties::Efron => (0..s.deaths).map(|r| r as f64 / d).collect(),
            Ties::Breslow => vec![0.0; s.deaths],
        };
        for f in parts {
            let s0 = r0 - f * d0;
            let mean = (&r1 - &d1 * f) / s0;
            loglik -= s0.ln();
            score -= &mean;
            info.zip_zip_apply(&r2, &d2, |i, a, b| *i += (a - f * b) / s0);
            info.ger(-1.0, &mean, &mean, 1.0);
        }
    }
    Eval { loglik, score, info }
}

/// Lin-Wei score residuals (Efron-adjusted when requested).
fn residuals(strata: &[(Time, Stratum)], beta: &DVector<f64>, ties: Ties, n: usize) -> Vec<DVector<f64>> {
    let p = beta.len();
    let mut out = vec![DVector::zeros(p); n];
    for (_, s) in strata {
        let exps: Vec<f64> = s.members.iter().map(|(_, z, _)| z.dot(beta).exp()).collect();
        let (mut r0, mut r1, mut d0, mut d1) = (0.0, DVector::zeros(p), 0.0, DVector::zeros(p));
        for ((_, z, dies), &e) in s.members.iter().zip(&exps) {
            r0 += e;
            r1.axpy(e, z, 1.0);
            if *dies {
                d0 += e;
                d1.axpy(e, z, 1.0);
            }
        }
        let d = s.deaths as f64;
        let fractions: Vec<f64> = match ties {
            Ties::Efron => (0..s.deaths).map(|r| r as f64 / d).collect(),
            Ties::Breslow => vec![0.0; s.deaths],
        };
        // compensator of member j: sum_r c_jr e_j (z_j - Zbar_r) / S0_r with
        // c_jr = 1 - f_r for members dying here, 1 otherwise
        let (mut alpha0, mut alpha1) = (0.0, 0.0);
        let (mut v0, mut v1, mut mean_avg) = (DVector::zeros(p), DVector::zeros(p), DVector::zeros(p));
        for &f in &fractions {
            let s0 = r0 - f * d0;
            let mean = (&r1 - &d1 * f) / s0;
            alpha0 += 1.0 / s0;
            alpha1 += f / s0;
            v0.axpy(1.0 / s0, &mean, 1.0);
            v1.axpy(f / s0, &mean, 1.0);
            mean_avg.axpy(1.0 / d, &mean, 1.0);
        }
        for ((i, z, dies), &e) in s.members.iter().zip(&exps) {
            let o = &mut out[*i];
            if *dies {
                *o += z - &mean_avg;
                o.axpy(-e, &(z * (alpha0 - alpha1) - (&v0 - &v1)), 1.0);
            } else {
                o.axpy(-e, &(z * alpha0 - &v0), 1.0);
            }
        }
    }
    out
}

fn newton(strata: &[(Time, Stratum)], p: usize, ties: Ties, n: usize, event: usize) -> Result<(EventFit, Eval)> {
    const MAX_ITERATIONS: usize = 100;
    const MAX_HALVINGS: usize = 25;
    let mut beta = DVector::zeros(p);
    let mut cur = evaluate(strata, &beta, ties);
    let mut iterations = 0;
    while linalg::sup_norm(&cur.score) / n as f64 >= 1e-9 {
        if iterations == MAX_ITERATIONS {
            return Err(Error::NonConvergence(format!("event {event}: Cox fit did not converge")));
        }
        iterations += 1;
        let step = linalg::robust_inverse(&cur.info, "Cox information")? * &cur.score;
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..=MAX_HALVINGS {
            let b = &beta + &step * t;
            let e = evaluate(strata, &b, ties);
            if e.loglik.is_finite() && e.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                next = Some((b, e));
                break;
            }
            t *= 0.5;
        }
        let (b, e) = next
            .ok_or_else(|| Error::NonConvergence(format!("event {event}: step-halving exhausted")))?;
        if linalg::sup_norm(&b) > 50.0 {
            return Err(Error::NonConvergence(format!("event {event}: coefficients diverged")));
        }
        beta = b;
        cur = e;
    }
    // polish
    if let Ok(inv) = linalg::robust_inverse(&cur.info, "Cox information") {
        let b = &beta + inv * &cur.score;
        let e = evaluate(strata, &b, ties);
        if linalg::sup_norm(&e.score) < linalg::sup_norm(&cur.score) {
            beta = b;
            cur = e;
        }
    }
    let fit = EventFit {
        event,
        beta: beta.iter().copied().collect(),
        converged: true,
        iterations,
        score_norm: linalg::sup_norm(&cur.score) / n as f64,
        loglik: cur.loglik,
    };
    Ok((fit, cur))
}

/// Fits every event type and the robust covariance
/// `I^{-1} (sum_i r_i r_i') I^{-1}` with cross-event blocks.
pub fn fit_wlw(data: &StudyDataset, ties: Ties, source: OutcomeSource) -> Result<FitResult> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Invalid("no subjects".into()));
    }
    let mut events = Vec::with_capacity(data.n_events);
    let mut infos = Vec::with_capacity(data.n_events);
    let mut per_event_resid = Vec::with_capacity(data.n_events);
    for k in 0..data.n_events {
        let obs = data
            .subjects
            .iter()
            .map(|s| {
                let path = s
                    .events
                    .get(k)
                    .ok_or_else(|| Error::Invalid(format!("subject {} lacks event {}", s.id, k + 1)))?;
                observe(path, source)
            })
            .collect::<Result<Vec<_>>>()?;
        let p = data.subjects[0].events[k].covariate_dim();
        if !obs.iter().any(|o| o.event) {
            return Err(Error::Degenerate(format!("event {}: no observed events", k + 1)));
        }
        let st = strata(&obs);
        let (fit, eval) = newton(&st, p, ties, n, k + 1)?;
        let beta = DVector::from_vec(fit.beta.clone());
        per_event_resid.push(residuals(&st, &beta, ties, n));
        infos.push(eval.info);
        events.push(fit);
    }
    let resid: Vec<DVector<f64>> = (0..n)
        .map(|i| linalg::stack(&per_event_resid.iter().map(|r| r[i].clone()).collect::<Vec<_>>()))
        .collect();
    let bread = linalg::robust_inverse(&linalg::block_diag(&infos), "Cox information")?;
    let meat = linalg::outer_sum(&resid, &resid);
    let cov = linalg::project_psd(&linalg::sandwich(&bread, &meat))?;
    Ok(FitResult { ties, n_subjects: n, events, cov, bread, residuals: resid })
}

/// How a common effect across event types is combined.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonMethod {
    /// `c = (e' S^{-1} e)^{-1} S^{-1} e`, the minimum-variance combination.
    #[default]
    MinimumVariance,
    /// `c = (e' S e)^{-1} S e`.
    CovarianceWeighted,
}

#[derive(Clone, Debug, Serialize)]
pub struct CommonEffect {
    pub method: CommonMethod,
    pub weights: Vec<f64>,
    pub estimate: f64,
    pub se: f64,
}

fn combination(cov: &DMatrix<f64>, method: CommonMethod) -> Result<DVector<f64>> {
    let e = DVector::from_element(cov.nrows(), 1.0);
    let v = match method {
        CommonMethod::MinimumVariance => linalg::robust_inverse(cov, "common-effect covariance")? * &e,
        CommonMethod::CovarianceWeighted => cov * &e,
    };
    let total = e.dot(&v);
    if total == 0.0 || !total.is_finite() {
        return Err(Error::Singular("common-effect weights do not normalize".into()));
    }
    Ok(v / total)
}

/// Combines per-event estimates of one coefficient into a common effect.
pub fn common_effect(beta: &[f64], cov: &DMatrix<f64>, method: CommonMethod) -> Result<CommonEffect> {
    let k = beta.len();
    if cov.shape() != (k, k) || k == 0 {
        return Err(Error::Dimension(format!("common effect: {k} estimates with a {:?} covariance", cov.shape())));
    }
    let c = combination(cov, method)?;
    let other = match method {
        CommonMethod::MinimumVariance => CommonMethod::CovarianceWeighted,
        CommonMethod::CovarianceWeighted => CommonMethod::MinimumVariance,
    };
    if let Ok(alt) = combination(cov, other) {
        if (&alt - &c).amax() > 1e-8 {
            log::warn!("common-effect weights depend on the combination rule: {:?} vs {:?}", c.as_slice(), alt.as_slice());
        }
    }
    let b = DVector::from_column_slice(beta);
    let var = (c.transpose() * cov * &c)[(0, 0)];
    Ok(CommonEffect {
        method,
        weights: c.iter().copied().collect(),
        estimate: c.dot(&b),
        se: var.max(0.0).sqrt(),
    })
}
