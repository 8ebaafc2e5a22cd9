//! Event-specific pooled logistic measurement-error models fitted in the
//! validation study.
//!
//! For event `k` the model is
//! `logit P[delta_k(t) = 1 | delta_k(t-) = 0, W_k(t)] = gamma_k' W_k(t)`,
//! fitted on person-time rows up to and including the first true event.
//! The per-subject score contributions are kept so that the K fits can be
//! stacked into one joint sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{EventPath, StudyDataset, Time, TimeScale};
use crate::error::{Error, Result};
use crate::linalg;

pub const MAX_ITERATIONS: usize = 100;
pub const SCORE_TOLERANCE: f64 = 1e-9;
pub const STEP_TOLERANCE: f64 = 1e-10;
pub const MAX_HALVINGS: usize = 25;
/// Coefficient bound on standardized predictors beyond which the fit is
/// declared separated.
pub const SEPARATION_BOUND: f64 = 15.0;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One column of `W_k(t)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    SelfReport,
    Time,
    /// `z_j`, 1-based.
    Covariate(usize),
    AllCovariates,
    /// `w_j`, 1-based.
    Raw(usize),
    AllRaw,
}

/// Predictor selection for one event type.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictorSet {
    pub intercept: bool,
    pub terms: Vec<Predictor>,
}

impl PredictorSet {
    /// Intercept, self-report, all covariates and time.
    pub fn standard() -> Self {
        PredictorSet {
            intercept: true,
            terms: vec![Predictor::SelfReport, Predictor::AllCovariates, Predictor::Time],
        }
    }

    /// Parses a comma list such as `self_report,z,t`. The intercept is on
    /// unless the list contains `-intercept`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = PredictorSet { intercept: true, terms: Vec::new() };
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let term = match token {
                "intercept" | "1" => {
                    set.intercept = true;
                    continue;
                }
                "-intercept" | "-1" => {
                    set.intercept = false;
                    continue;
                }
                "self_report" => Predictor::SelfReport,
                "t" | "time" => Predictor::Time,
                "z" => Predictor::AllCovariates,
                "w" => Predictor::AllRaw,
                other => {
                    let numbered = |prefix: &str| {
                        other.strip_prefix(prefix).and_then(|r| r.parse::<usize>().ok()).filter(|&j| j >= 1)
                    };
                    if let Some(j) = numbered("z_") {
                        Predictor::Covariate(j)
                    } else if let Some(j) = numbered("w_") {
                        Predictor::Raw(j)
                    } else {
                        return Err(Error::Config(format!("unknown predictor {other:?}")));
                    }
                }
            };
            set.terms.push(term);
        }
        Ok(set)
    }

    /// `W(t)` at the `j`-th grid time of `path`.
    pub fn row(&self, path: &EventPath, j: usize, scale: TimeScale) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        if self.intercept {
            out.push(1.0);
        }
        let z = &path.covariates[j];
        let w = &path.me_predictors[j];
        for term in &self.terms {
            match term {
                Predictor::SelfReport => out.push(if path.self_report[j] { 1.0 } else { 0.0 }),
                Predictor::Time => out.push(scale.value(path.times()[j])),
                Predictor::AllCovariates => out.extend_from_slice(z),
                Predictor::AllRaw => out.extend_from_slice(w),
                Predictor::Covariate(c) => out.push(*z.get(c - 1).ok_or_else(|| {
                    Error::Dimension(format!("predictor z_{c} requested, only {} covariates", z.len()))
                })?),
                Predictor::Raw(c) => out.push(*w.get(c - 1).ok_or_else(|| {
                    Error::Dimension(format!("predictor w_{c} requested, only {} raw predictors", w.len()))
                })?),
            }
        }
        Ok(out)
    }
}

/// Predictor selection for each of the K event types.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeModelSpec {
    pub events: Vec<PredictorSet>,
}

impl MeModelSpec {
    pub fn uniform(set: PredictorSet, n_events: usize) -> Self {
        MeModelSpec { events: vec![set; n_events] }
    }

    pub fn for_event(&self, k: usize) -> &PredictorSet {
        &self.events[k]
    }
}

/// Person-time rows of one event type in the validation study.
#[derive(Clone, Debug)]
pub struct PersonTimeTable {
    pub event: usize,
    pub n_subjects: usize,
    pub intercept: bool,
    /// Index into the validation dataset for each row.
    pub subject: Vec<usize>,
    pub time: Vec<Time>,
    pub outcome: Vec<bool>,
    pub design: DMatrix<f64>,
}

impl PersonTimeTable {
    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }
}

/// One row per (subject, grid time) with `t <= C` and no true event before
/// `t`; rows after the first true event are dropped.
pub fn expand_person_time(validation: &StudyDataset, k: usize, set: &PredictorSet) -> Result<PersonTimeTable> {
    let mut subject = Vec::new();
    let mut time = Vec::new();
    let mut outcome = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, s) in validation.subjects.iter().enumerate() {
        let path = s.events.get(k).ok_or_else(|| Error::Invalid(format!("subject {}: no event {}", s.id, k + 1)))?;
        let truth = path
            .true_status
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("subject {}: true status required for the error model", s.id)))?;
        for j in 0..path.n_effective() {
            subject.push(i);
            time.push(path.times()[j]);
            outcome.push(truth[j]);
            rows.push(set.row(path, j, validation.scale)?);
            if truth[j] {
                break;
            }
        }
    }
    let dim = rows.first().map_or(usize::from(set.intercept) + set.terms.len(), Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension(format!("event {}: predictor rows differ in length", k + 1)));
    }
    let design = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
    Ok(PersonTimeTable {
        event: k,
        n_subjects: validation.len(),
        intercept: set.intercept,
        subject,
        time,
        outcome,
        design,
    })
}

/// Result of one pooled logistic fit.
#[derive(Clone, Debug, Serialize)]
pub struct LogisticFit {
    pub gamma: Vec<f64>,
    /// Observed information `sum p(1-p) W W'` (unnormalized).
    #[serde(skip)]
    pub information: DMatrix<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    pub n_rows: usize,
    pub n_cases: usize,
}

fn log_likelihood(x: &DMatrix<f64>, y: &[bool], gamma: &DVector<f64>) -> f64 {
    let eta = x * gamma;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + e^eta) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            if yi {
                e - softplus
            } else {
                -softplus
            }
        })
        .sum()
}

fn score_and_information(x: &DMatrix<f64>, y: &[bool], gamma: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * gamma;
    let p = x.ncols();
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (r, (&e, &yi)) in eta.iter().zip(y).enumerate() {
        let mu = expit(e);
        let resid = f64::from(u8::from(yi)) - mu;
        let v = mu * (1.0 - mu);
        let row = x.row(r);
        for a in 0..p {
            score[a] += resid * row[a];
            for b in 0..=a {
                info[(a, b)] += v * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    (score, info)
}

/// Damped Newton (IRLS) maximum likelihood for the pooled logistic model.
/// Predictors are standardized internally and coefficients are reported on
/// the original scale.
pub fn fit_pooled_logistic(table: &PersonTimeTable) -> Result<LogisticFit> {
    let n = table.len();
    let n_cases = table.outcome.iter().filter(|&&y| y).count();
    if n_cases == 0 || n_cases == n {
        return Err(Error::Degenerate(format!(
            "event {}: pooled logistic model needs both outcomes ({n_cases} events in {n} rows)",
            table.event + 1
        )));
    }
    let dim = table.dim();
    let x = &table.design;

    // standardization: x' = (x - center) / scale on non-constant columns
    let mut center = vec![0.0; dim];
    let mut scale = vec![1.0; dim];
    for c in 0..dim {
        let col = x.column(c);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 {
            scale[c] = sd;
            if table.intercept {
                center[c] = mean;
            }
        }
    }
    let xs = DMatrix::from_fn(n, dim, |r, c| (x[(r, c)] - center[c]) / scale[c]);
    let to_original = |g: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::from_fn(dim, |c, _| g[c] / scale[c]);
        if table.intercept {
            let shift: f64 = (0..dim).map(|c| out[c] * center[c]).sum();
            out[0] -= shift;
        }
        out
    };

    let mut gamma = DVector::zeros(dim);
    let mut ll = log_likelihood(&xs, &table.outcome, &gamma);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let (score, info) = score_and_information(&xs, &table.outcome, &gamma);
        if linalg::sup_norm(&score) < SCORE_TOLERANCE {
            converged = true;
            break;
        }
        let inv = linalg::robust_inverse(&info, "pooled logistic information")?;
        let step = inv * &score;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &gamma + &step * t;
            let cand_ll = log_likelihood(&xs, &table.outcome, &candidate);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                accepted = Some((candidate, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_ll)) = accepted else {
            return Err(Error::NonConvergence(format!(
                "event {}: step-halving exhausted in pooled logistic fit",
                table.event + 1
            )));
        };
        let change = linalg::sup_norm(&(&next - &gamma)) / linalg::sup_norm(&next).max(1e-300);
        gamma = next;
        ll = next_ll;
        let norm = linalg::sup_norm(&gamma);
        if norm > SEPARATION_BOUND {
            return Err(Error::Separation { event: table.event + 1, norm });
        }
        if t == 1.0 && change < STEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "event {}: pooled logistic fit did not converge in {MAX_ITERATIONS} iterations",
            table.event + 1
        )));
    }
    let gamma = to_original(&gamma);
    let (score, information) = score_and_information(x, &table.outcome, &gamma);
    Ok(LogisticFit {
        gamma: gamma.iter().copied().collect(),
        information,
        iterations,
        score_norm: linalg::sup_norm(&score),
        n_rows: n,
        n_cases,
    })
}

/// Per-subject score contributions `pi_i = sum_t (delta_i(t) - h_i(t)) W_i(t)`.
/// Subjects without rows get a zero vector.
pub fn subject_scores(table: &PersonTimeTable, gamma: &[f64]) -> Vec<DVector<f64>> {
    let g = DVector::from_column_slice(gamma);
    let mut out = vec![DVector::zeros(table.dim()); table.n_subjects];
    for r in 0..table.len() {
        let w = table.design.row(r).transpose();
        let resid = f64::from(u8::from(table.outcome[r])) - expit(w.dot(&g));
        out[table.subject[r]] += w * resid;
    }
    out
}

/// Fitted model for one event type.
#[derive(Clone, Debug, Serialize)]
pub struct EventMeFit {
    pub event: usize,
    #[serde(flatten)]
    pub fit: LogisticFit,
    /// pi_ki in validation-subject order.
    #[serde(skip)]
    pub scores: Vec<DVector<f64>>,
}

impl EventMeFit {
    pub fn gamma(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.fit.gamma)
    }

    pub fn dim(&self) -> usize {
        self.fit.gamma.len()
    }
}

/// All K measurement-error fits with their joint covariance.
#[derive(Clone, Debug, Serialize)]
pub struct MeModelFit {
    pub spec: MeModelSpec,
    pub events: Vec<EventMeFit>,
    pub n_validation: usize,
    /// Covariance of the stacked `(gamma_1, ..., gamma_K)`.
    #[serde(skip)]
    pub joint_cov: DMatrix<f64>,
}

impl MeModelFit {
    /// `pi_i` stacked across events for validation subject `i`.
    pub fn stacked_scores(&self) -> Vec<DVector<f64>> {
        (0..self.n_validation)
            .map(|i| linalg::stack(&self.events.iter().map(|e| e.scores[i].clone()).collect::<Vec<_>>()))
            .collect()
    }

    pub fn total_dim(&self) -> usize {
        self.events.iter().map(EventMeFit::dim).sum()
    }
}

/// Fits every event's model and their joint sandwich covariance.
pub fn fit_me_model(validation: &StudyDataset, spec: &MeModelSpec) -> Result<MeModelFit> {
    validation.validate()?;
    if spec.events.len() != validation.n_events {
        return Err(Error::Config(format!(
            "error-model spec covers {} events, data has {}",
            spec.events.len(),
            validation.n_events
        )));
    }
    let mut events = Vec::with_capacity(validation.n_events);
    for k in 0..validation.n_events {
        let table = expand_person_time(validation, k, spec.for_event(k))?;
        let fit = fit_pooled_logistic(&table)?;
        let scores = subject_scores(&table, &fit.gamma);
        events.push(EventMeFit { event: k + 1, fit, scores });
    }
    let joint_cov = me_joint_cov(&events, validation.len())?;
    Ok(MeModelFit { spec: spec.clone(), events, n_validation: validation.len(), joint_cov })
}

/// `A^{-1} B A^{-T} / n_V` with `A = -(1/n_V) blockdiag(information_k)` and
/// `B = (1/n_V) sum_l pi_l pi_l'` over stacked scores.
pub fn me_joint_cov(events: &[EventMeFit], n_validation: usize) -> Result<DMatrix<f64>> {
    let n = n_validation as f64;
    let a = linalg::block_diag(&events.iter().map(|e| -&e.fit.information / n).collect::<Vec<_>>());
    let stacked: Vec<DVector<f64>> = (0..n_validation)
        .map(|i| linalg::stack(&events.iter().map(|e| e.scores[i].clone()).collect::<Vec<_>>()))
        .collect();
    let b = linalg::outer_sum(&stacked, &stacked) / n;
    let a_inv = linalg::robust_inverse(&a, "error-model information")?;
    linalg::project_psd(&(linalg::sandwich(&a_inv, &b) / n))
}
