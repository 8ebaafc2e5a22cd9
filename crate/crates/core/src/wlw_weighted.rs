//! Weighted WLW estimating equations with Breslow or Efron ties.
//!
//! Every grid time is a potential event time. Subject `i` contributes
//! `w_i(t) [Z_i(t) - S1/S0]` at each of its grid times, where the risk-set
//! sums use the at-risk probabilities `Y~_j(t)`. Risk sets are evaluated on
//! the union of all subjects' effective grid times.
//!
//! Under Efron ties the risk-set sums at a time with `d` potential events
//! become `S(r) = sum_j Y~_j (1 - (r-1)/d h_j) e^{b'Z_j} (...)` for
//! `r = 1..d`, and each contribution is averaged over `r`.

use nalgebra::{DMatrix, DVector};

use crate::data::{StudyDataset, Time};
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::WeightTable;
use crate::wlw_standard::EventFit;
use crate::Ties;

pub const MAX_ITERATIONS: usize = 100;
pub const MAX_HALVINGS: usize = 25;
pub const SCORE_TOLERANCE: f64 = 1e-9;
pub const DIVERGENCE_BOUND: f64 = 50.0;

/// One subject's state at one risk-set time.
#[derive(Clone, Debug)]
pub struct RiskEntry {
    pub subject: usize,
    pub y_tilde: f64,
    /// Zero when the time is not on this subject's grid.
    pub hazard: f64,
    pub weight: f64,
    pub z: DVector<f64>,
    pub d_y_tilde: Option<DVector<f64>>,
    pub d_hazard: Option<DVector<f64>>,
    pub d_weight: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct TimeSlice {
    pub time: Time,
    /// Subjects with `C >= t` and `Y~(t) > 0`.
    pub entries: Vec<RiskEntry>,
    /// Number of subjects with a potential event here (positive weight).
    pub ties: usize,
    /// `sum_i w_i(t)`.
    pub total_weight: f64,
}

impl TimeSlice {
    /// Efron fractions `(r-1)/d`; a single zero for Breslow or when no
    /// subject carries hazard mass.
    pub fn fractions(&self, ties: Ties) -> Vec<f64> {
        let has_mass = self.entries.iter().any(|e| e.hazard != 0.0);
        match ties {
            Ties::Efron if self.ties > 1 && has_mass => {
                let d = self.ties as f64;
                (0..self.ties).map(|r| r as f64 / d).collect()
            }
            _ => vec![0.0],
        }
    }
}

/// Risk sets of one event type on the union grid.
#[derive(Clone, Debug)]
pub struct RiskPanel {
    pub event: usize,
    pub n_subjects: usize,
    pub dim: usize,
    /// Length of the gamma-derivatives carried by the entries (0 if none).
    pub gamma_dim: usize,
    pub slices: Vec<TimeSlice>,
}

impl RiskPanel {
    pub fn build(data: &StudyDataset, weights: &WeightTable, k: usize) -> Result<Self> {
        if weights.subjects.len() != data.len() {
            return Err(Error::Dimension(format!(
                "weight table has {} subjects, data has {}",
                weights.subjects.len(),
                data.len()
            )));
        }
        let mut times: Vec<Time> =
            weights.event(k).flat_map(|sw| sw.rows.iter().map(|r| r.time)).collect();
        times.sort_unstable();
        times.dedup();
        let dim = data
            .subjects
            .first()
            .and_then(|s| s.events.get(k))
            .map_or(0, |e| e.covariate_dim());
        let mut gamma_dim = 0;
        let mut slices = Vec::with_capacity(times.len());
        for &u in &times {
            let mut entries = Vec::new();
            for (j, (s, sw)) in data.subjects.iter().zip(weights.event(k)).enumerate() {
                let (y_tilde, d_y) = sw.at_risk(u);
                if y_tilde <= 0.0 {
                    continue;
                }
                let path = &s.events[k];
                let z = path.covariates_at(u);
                if z.len() != dim {
                    return Err(Error::Dimension(format!(
                        "subject {}: {} covariates, expected {dim}",
                        s.id,
                        z.len()
                    )));
                }
                let row = sw.row_at(u);
                let (hazard, weight) = row.map_or((0.0, 0.0), |r| (r.hazard, r.weight));
                let derivs = row.and_then(|r| r.derivatives.as_ref());
                if let Some(d) = derivs {
                    gamma_dim = d.hazard.len();
                }
                entries.push(RiskEntry {
                    subject: j,
                    y_tilde,
                    hazard,
                    weight,
                    z: DVector::from_column_slice(z),
                    d_y_tilde: if weights.has_derivatives { d_y.cloned() } else { None },
                    d_hazard: derivs.map(|d| d.hazard.clone()),
                    d_weight: derivs.map(|d| d.weight.clone()),
                });
            }
            if entries.is_empty() {
                continue;
            }
            let ties = entries.iter().filter(|e| e.weight > 0.0).count();
            let total_weight = entries.iter().map(|e| e.weight).sum();
            slices.push(TimeSlice { time: u, entries, ties, total_weight });
        }
        Ok(RiskPanel { event: k, n_subjects: data.len(), dim, gamma_dim, slices })
    }

    pub fn total_weight(&self) -> f64 {
        self.slices.iter().map(|s| s.total_weight).sum()
    }
}

/// Risk-set sums at one slice: `A = sum Y~ e (1, Z, ZZ')` and
/// `B = sum Y~ h e (1, Z, ZZ')`.
pub(crate) struct SliceSums {
    pub exp_eta: Vec<f64>,
    pub a0: f64,
    pub a1: DVector<f64>,
    pub a2: DMatrix<f64>,
    pub b0: f64,
    pub b1: DVector<f64>,
    pub b2: DMatrix<f64>,
}

impl SliceSums {
    pub fn new(slice: &TimeSlice, beta: &DVector<f64>, second_order: bool) -> Self {
        let p = beta.len();
        let mut s = SliceSums {
            exp_eta: Vec::with_capacity(slice.entries.len()),
            a0: 0.0,
            a1: DVector::zeros(p),
            a2: DMatrix::zeros(p, p),
            b0: 0.0,
            b1: DVector::zeros(p),
            b2: DMatrix::zeros(p, p),
        };
        for e in &slice.entries {
            let ex = e.z.dot(beta).exp();
            s.exp_eta.push(ex);
            let ya = e.y_tilde * ex;
            let yb = ya * e.hazard;
            s.a0 += ya;
            s.a1.axpy(ya, &e.z, 1.0);
            s.b0 += yb;
            s.b1.axpy(yb, &e.z, 1.0);
            if second_order {
                s.a2.ger(ya, &e.z, &e.z, 1.0);
                s.b2.ger(yb, &e.z, &e.z, 1.0);
            }
        }
        s
    }

    /// Writes `S1(r) / S0(r)` at Efron fraction `f` into `zbar` and
    /// returns `S0(r)`.
    pub fn mean_at(&self, f: f64, zbar: &mut DVector<f64>) -> f64 {
        let s0 = self.a0 - f * self.b0;
        zbar.copy_from(&self.a1);
        zbar.axpy(-f / s0, &self.b1, 1.0 / s0);
        s0
    }
}

/// Value, gradient and Hessian of the weighted log partial likelihood
/// (unnormalized sums).
#[derive(Clone, Debug)]
pub struct ScoreEval {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

pub fn evaluate(panel: &RiskPanel, beta: &DVector<f64>, ties: Ties, second_order: bool) -> ScoreEval {
    let p = panel.dim;
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut jacobian = DMatrix::zeros(p, p);
    for slice in &panel.slices {
        let d_total = slice.total_weight;
        if d_total == 0.0 {
            continue;
        }
        let sums = SliceSums::new(slice, beta, second_order);
        for e in slice.entries.iter().filter(|e| e.weight != 0.0) {
            loglik += e.weight * e.z.dot(beta);
            score.axpy(e.weight, &e.z, 1.0);
        }
        let fractions = slice.fractions(ties);
        let share = d_total / fractions.len() as f64;
        let mut zbar = DVector::zeros(p);
        for &f in &fractions {
            let s0 = sums.mean_at(f, &mut zbar);
            loglik -= share * s0.ln();
            score.axpy(-share, &zbar, 1.0);
            if second_order {
                jacobian.zip_zip_apply(&sums.a2, &sums.b2, |j, a, b| *j -= share * (a - f * b) / s0);
                jacobian.ger(share, &zbar, &zbar, 1.0);
            }
        }
    }
    ScoreEval { loglik, score, jacobian }
}

/// Normalized score `(1/n) sum_i phi_i` with a flag for all-zero weights.
#[derive(Clone, Debug)]
pub struct WeightedScore {
    pub score: DVector<f64>,
    pub degenerate: bool,
}

fn normalized_score(panel: &RiskPanel, beta: &DVector<f64>, ties: Ties) -> WeightedScore {
    let n = panel.n_subjects.max(1) as f64;
    let eval = evaluate(panel, beta, ties, false);
    WeightedScore { score: eval.score / n, degenerate: panel.total_weight() == 0.0 }
}

pub fn weighted_score_breslow(panel: &RiskPanel, beta: &DVector<f64>) -> WeightedScore {
    normalized_score(panel, beta, Ties::Breslow)
}

pub fn weighted_score_efron(panel: &RiskPanel, beta: &DVector<f64>) -> WeightedScore {
    normalized_score(panel, beta, Ties::Efron)
}

/// `(1/n) dU/dbeta`.
pub fn score_jacobian(panel: &RiskPanel, beta: &DVector<f64>, ties: Ties) -> DMatrix<f64> {
    evaluate(panel, beta, ties, true).jacobian / panel.n_subjects.max(1) as f64
}

/// `(1/n) dU/dgamma` from the carried weight derivatives.
pub fn score_gamma_jacobian(panel: &RiskPanel, beta: &DVector<f64>, ties: Ties) -> Result<DMatrix<f64>> {
    let (p, q) = (panel.dim, panel.gamma_dim);
    let mut out = DMatrix::zeros(p, q);
    let zero = DVector::zeros(q);
    let mut zbar = DVector::zeros(p);
    for slice in &panel.slices {
        let sums = SliceSums::new(slice, beta, false);
        let mut d_total = DVector::zeros(q);
        let mut m_a = DVector::zeros(q);
        let mut m_za = DMatrix::zeros(p, q);
        let mut m_b = DVector::zeros(q);
        let mut m_zb = DMatrix::zeros(p, q);
        for (e, &ex) in slice.entries.iter().zip(&sums.exp_eta) {
            let d_y = e.d_y_tilde.as_ref().unwrap_or(&zero);
            if let Some(dw) = &e.d_weight {
                out.ger(1.0, &e.z, dw, 1.0);
                d_total += dw;
            }
            m_a.axpy(ex, d_y, 1.0);
            m_za.ger(ex, &e.z, d_y, 1.0);
            // d(Y~ h e) = e (h dY~ + Y~ dh)
            m_b.axpy(e.hazard * ex, d_y, 1.0);
            m_zb.ger(e.hazard * ex, &e.z, d_y, 1.0);
            if let Some(dh) = &e.d_hazard {
                m_b.axpy(e.y_tilde * ex, dh, 1.0);
                m_zb.ger(e.y_tilde * ex, &e.z, dh, 1.0);
            } else if e.hazard != 0.0 && q > 0 {
                return Err(Error::Config("weight table was built without gamma-derivatives".into()));
            }
        }
        let fractions = slice.fractions(ties);
        let nr = fractions.len() as f64;
        let c = slice.total_weight / nr;
        let (mut inv_sum, mut f_inv_sum) = (0.0, 0.0);
        for &f in &fractions {
            let s0 = sums.mean_at(f, &mut zbar);
            out.ger(-1.0 / nr, &zbar, &d_total, 1.0);
            // dZbar(r) = [(M_za - f M_zb) - Zbar(r) (M_a - f M_b)'] / S0(r)
            inv_sum += 1.0 / s0;
            f_inv_sum += f / s0;
            out.ger(c / s0, &zbar, &m_a, 1.0);
            out.ger(-c * f / s0, &zbar, &m_b, 1.0);
        }
        out -= &m_za * (c * inv_sum);
        out += &m_zb * (c * f_inv_sum);
    }
    Ok(out / panel.n_subjects.max(1) as f64)
}

/// Newton-Raphson with step-halving on the weighted log partial likelihood.
pub fn solve_weighted(panel: &RiskPanel, ties: Ties, init: &DVector<f64>) -> Result<EventFit> {
    if init.len() != panel.dim {
        return Err(Error::Dimension(format!(
            "initial value has length {}, model has {}",
            init.len(),
            panel.dim
        )));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("initial value must be finite".into()));
    }
    if panel.total_weight() == 0.0 {
        return Err(Error::Degenerate(format!(
            "event {}: all event-time weights are zero",
            panel.event + 1
        )));
    }
    let n = panel.n_subjects as f64;
    let mut beta = init.clone();
    let mut eval = evaluate(panel, &beta, ties, true);
    let mut iterations = 0;
    loop {
        let norm = linalg::sup_norm(&eval.score) / n;
        if norm < SCORE_TOLERANCE {
            // one polishing step while it still helps
            if let Ok(inv) = linalg::robust_inverse(&(-&eval.jacobian), "weighted information") {
                let candidate = &beta + inv * &eval.score;
                let cand = evaluate(panel, &candidate, ties, true);
                if linalg::sup_norm(&cand.score) < linalg::sup_norm(&eval.score) {
                    beta = candidate;
                    eval = cand;
                }
            }
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::NonConvergence(format!(
                "event {}: weighted fit did not converge in {MAX_ITERATIONS} iterations (score {norm:.3e})",
                panel.event + 1
            )));
        }
        iterations += 1;
        let inv = linalg::robust_inverse(&(-&eval.jacobian), "weighted information")?;
        let step = inv * &eval.score;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * t;
            let cand = evaluate(panel, &candidate, ties, true);
            if cand.loglik.is_finite() && cand.loglik >= eval.loglik - 1e-12 * eval.loglik.abs() {
                accepted = Some((candidate, cand));
                break;
            }
            t *= 0.5;
        }
        let Some((next, next_eval)) = accepted else {
            return Err(Error::NonConvergence(format!(
                "event {}: step-halving exhausted after {MAX_HALVINGS} halvings",
                panel.event + 1
            )));
        };
        if linalg::sup_norm(&next) > DIVERGENCE_BOUND {
            return Err(Error::NonConvergence(format!(
                "event {}: coefficients diverged (|beta| > {DIVERGENCE_BOUND})",
                panel.event + 1
            )));
        }
        beta = next;
        eval = next_eval;
    }
    Ok(EventFit {
        event: panel.event + 1,
        beta: beta.iter().copied().collect(),
        converged: true,
        iterations,
        score_norm: linalg::sup_norm(&eval.score) / n,
        loglik: eval.loglik,
    })
}

/// Builds every event's panel and solves from `beta = 0`.
pub fn fit_weighted(
    data: &StudyDataset,
    weights: &WeightTable,
    ties: Ties,
) -> Result<(Vec<RiskPanel>, Vec<EventFit>)> {
    let mut panels = Vec::with_capacity(data.n_events);
    let mut fits = Vec::with_capacity(data.n_events);
    for k in 0..data.n_events {
        let panel = RiskPanel::build(data, weights, k)?;
        let fit = solve_weighted(&panel, ties, &DVector::zeros(panel.dim))?;
        panels.push(panel);
        fits.push(fit);
    }
    Ok((panels, fits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(subject: usize, y: f64, h: f64, z: f64) -> RiskEntry {
        RiskEntry {
            subject,
            y_tilde: y,
            hazard: h,
            weight: h * y,
            z: DVector::from_element(1, z),
            d_y_tilde: None,
            d_hazard: None,
            d_weight: None,
        }
    }

    fn panel(slices: Vec<Vec<RiskEntry>>, n: usize) -> RiskPanel {
        RiskPanel {
            event: 0,
            n_subjects: n,
            dim: 1,
            gamma_dim: 0,
            slices: slices
                .into_iter()
                .enumerate()
                .map(|(t, entries)| TimeSlice {
                    time: Time(t as i64 + 1),
                    ties: entries.iter().filter(|e| e.weight > 0.0).count(),
                    total_weight: entries.iter().map(|e| e.weight).sum(),
                    entries,
                })
                .collect(),
        }
    }

    #[test]
    fn two_subjects_equal_weights_score_zero() {
        let p = panel(vec![vec![entry(0, 1.0, 0.5, 0.0), entry(1, 1.0, 0.5, 1.0)]], 2);
        let s = weighted_score_breslow(&p, &DVector::zeros(1));
        assert!(s.score[0].abs() < 1e-15);
        assert!(!s.degenerate);
    }

    #[test]
    fn zero_weights_are_flagged() {
        let p = panel(vec![vec![entry(0, 1.0, 0.0, 0.0), entry(1, 1.0, 0.0, 1.0)]], 2);
        let s = weighted_score_efron(&p, &DVector::zeros(1));
        assert_eq!(s.score[0], 0.0);
        assert!(s.degenerate);
        assert!(matches!(solve_weighted(&p, Ties::Breslow, &DVector::zeros(1)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_subject_has_rank_zero_jacobian() {
        let p = panel(vec![vec![entry(0, 1.0, 0.4, 2.0)]], 1);
        let j = score_jacobian(&p, &DVector::from_element(1, 0.3), Ties::Efron);
        assert!(j[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn efron_equals_breslow_without_ties() {
        let p = panel(
            vec![
                vec![entry(0, 1.0, 0.3, 0.0), entry(1, 1.0, 0.0, 1.0), entry(2, 1.0, 0.0, 0.5)],
                vec![entry(1, 1.0, 0.6, 1.0), entry(2, 1.0, 0.0, 0.5)],
            ],
            3,
        );
        let b = DVector::from_element(1, 0.4);
        assert_eq!(weighted_score_breslow(&p, &b).score, weighted_score_efron(&p, &b).score);
    }

    #[test]
    fn solver_converges_and_restarts_at_fixed_point() {
        let p = panel(
            vec![
                vec![entry(0, 1.0, 0.7, 0.0), entry(1, 1.0, 0.2, 1.0), entry(2, 1.0, 0.4, 0.5), entry(3, 1.0, 0.1, 2.0)],
                vec![entry(1, 0.8, 0.6, 1.0), entry(2, 0.6, 0.3, 0.5), entry(3, 0.9, 0.5, 2.0)],
            ],
            4,
        );
        for ties in [Ties::Breslow, Ties::Efron] {
            let fit = solve_weighted(&p, ties, &DVector::zeros(1)).unwrap();
            assert!(fit.score_norm < SCORE_TOLERANCE);
            let again = solve_weighted(&p, ties, &DVector::from_vec(fit.beta.clone())).unwrap();
            assert!(again.iterations <= 2);
            assert!(score_jacobian(&p, &DVector::from_vec(fit.beta.clone()), ties)[(0, 0)] < 0.0);
        }
    }
}
