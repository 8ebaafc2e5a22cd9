//! Probability weights for the potential event times.
//!
//! For a subject with conditional hazards `h(t)` on its grid, the event-time
//! weight is `w(t) = h(t) * prod_{t' < t} (1 - h(t'))`, the cumulative event
//! probability is `N~(t) = sum_{s <= t} w(s)` and the at-risk probability is
//! `Y~(t) = (1 - N~(t-)) I(C >= t)`. The origin carries `h = 0`.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data::{EventPath, StudyDataset, Time};
use crate::error::{Error, Result};
use crate::me_model::{expit, MeModelFit};

/// Conditional hazard of the true event at `t`. Zero at the origin.
pub fn hazard_prob(gamma: &[f64], w: &[f64], t: Time) -> Result<f64> {
    if gamma.len() != w.len() {
        return Err(Error::Dimension(format!(
            "coefficient length {} vs predictor length {}",
            gamma.len(),
            w.len()
        )));
    }
    if t == Time(0) {
        return Ok(0.0);
    }
    Ok(expit(gamma.iter().zip(w).map(|(g, x)| g * x).sum()))
}

/// Gamma-derivatives of one weight row.
#[derive(Clone, Debug)]
pub struct RowDerivatives {
    pub hazard: DVector<f64>,
    pub weight: DVector<f64>,
    pub y_tilde: DVector<f64>,
    /// Derivative of `prod_{t' <= t} (1 - h(t'))`.
    pub survival: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct WeightRow {
    pub time: Time,
    pub hazard: f64,
    pub weight: f64,
    pub n_tilde: f64,
    pub y_tilde: f64,
    /// `prod_{t' <= t} (1 - h(t'))`, the product form of `1 - N~(t)`.
    pub survival: f64,
    pub derivatives: Option<RowDerivatives>,
}

/// Weight rows of one subject for one event, at grid times with `C >= t`.
#[derive(Clone, Debug)]
pub struct SubjectWeights {
    pub censor: Time,
    pub rows: Vec<WeightRow>,
}

impl SubjectWeights {
    /// Accumulates the product-form weights from a hazard path. When
    /// `predictors` is given the gamma-derivatives are carried alongside.
    pub fn from_hazards(
        censor: Time,
        times: &[Time],
        hazards: &[f64],
        predictors: Option<&[DVector<f64>]>,
    ) -> Self {
        let dim = predictors.and_then(|w| w.first()).map_or(0, |w| w.len());
        let mut rows = Vec::with_capacity(times.len());
        let mut survival = 1.0;
        let mut n_tilde = 0.0;
        // sum_{t' <= t} h(t') W(t')
        let mut cum_hw = DVector::zeros(dim);
        for (j, (&time, &h)) in times.iter().zip(hazards).enumerate() {
            if time > censor {
                break;
            }
            let y_tilde = survival;
            let weight = h * y_tilde;
            n_tilde += weight;
            let derivatives = predictors.map(|ws| {
                let w = &ws[j];
                let d_hazard = w * (h * (1.0 - h));
                let d_y = &cum_hw * (-y_tilde);
                let d_weight = &d_hazard * y_tilde + &d_y * h;
                cum_hw += w * h;
                (d_hazard, d_weight, d_y)
            });
            survival *= 1.0 - h;
            let derivatives = derivatives.map(|(hazard, weight, y_tilde)| RowDerivatives {
                hazard,
                weight,
                y_tilde,
                survival: &cum_hw * (-survival),
            });
            rows.push(WeightRow { time, hazard: h, weight, n_tilde, y_tilde, survival, derivatives });
        }
        SubjectWeights { censor, rows }
    }

    /// Weights implied by the true status path: hazard one at the first
    /// true event and zero elsewhere, reproducing the counting process.
    pub fn degenerate(path: &EventPath) -> Result<Self> {
        let truth = path
            .true_status
            .as_ref()
            .ok_or_else(|| Error::Invalid("degenerate weights need a true-status path".into()))?;
        Ok(Self::from_indicator(path, truth))
    }

    /// Same construction from an arbitrary monotone indicator path.
    pub fn from_indicator(path: &EventPath, status: &[bool]) -> Self {
        let first = status[..path.n_effective()].iter().position(|&x| x);
        let hazards: Vec<f64> =
            (0..path.grid.len()).map(|j| if Some(j) == first { 1.0 } else { 0.0 }).collect();
        Self::from_hazards(path.censor, path.times(), &hazards, None)
    }

    /// `(Y~(u), dY~/dgamma)` at an arbitrary time `u`, not necessarily on
    /// this subject's grid.
    pub fn at_risk(&self, u: Time) -> (f64, Option<&DVector<f64>>) {
        if u > self.censor {
            return (0.0, None);
        }
        let before = self.rows.partition_point(|r| r.time < u);
        match before {
            0 => (1.0, None),
            j => {
                let r = &self.rows[j - 1];
                (r.survival, r.derivatives.as_ref().map(|d| &d.survival))
            }
        }
    }

    /// The row at time `u`, if `u` is an effective grid time.
    pub fn row_at(&self, u: Time) -> Option<&WeightRow> {
        self.rows.binary_search_by_key(&u, |r| r.time).ok().map(|j| &self.rows[j])
    }

    /// Probability of no event through the last effective grid time.
    pub fn residual_survival(&self) -> f64 {
        self.rows.last().map_or(1.0, |r| r.survival)
    }
}

/// Weights for every subject (outer index) and event type (inner index).
#[derive(Clone, Debug)]
pub struct WeightTable {
    pub n_events: usize,
    pub subjects: Vec<Vec<SubjectWeights>>,
    pub has_derivatives: bool,
}

impl WeightTable {
    pub fn event(&self, k: usize) -> impl Iterator<Item = &SubjectWeights> {
        self.subjects.iter().map(move |s| &s[k])
    }

    pub fn is_all_zero(&self, k: usize) -> bool {
        self.event(k).all(|s| s.rows.iter().all(|r| r.weight == 0.0))
    }
}

/// Weights from the fitted error models. The predictors `W_k(t)` are formed
/// from the main-study records with the same selection used in the fit.
pub fn build_weight_table(data: &StudyDataset, fit: &MeModelFit, with_derivatives: bool) -> Result<WeightTable> {
    if fit.events.len() != data.n_events {
        return Err(Error::Config(format!(
            "error model has {} events, data has {}",
            fit.events.len(),
            data.n_events
        )));
    }
    let gammas: Vec<DVector<f64>> = fit.events.iter().map(|e| e.gamma()).collect();
    let subjects = data
        .subjects
        .par_iter()
        .map(|s| {
            s.events
                .iter()
                .enumerate()
                .map(|(k, path)| {
                    let set = fit.spec.for_event(k);
                    let n_eff = path.n_effective();
                    let mut hazards = Vec::with_capacity(n_eff);
                    let mut predictors = Vec::with_capacity(n_eff);
                    for j in 0..n_eff {
                        let w = DVector::from_vec(set.row(path, j, data.scale).map_err(|e| {
                            Error::Invalid(format!("subject {}, event {}: {e}", s.id, k + 1))
                        })?);
                        if w.len() != gammas[k].len() {
                            return Err(Error::Dimension(format!(
                                "subject {}, event {}: {} predictors, model has {}",
                                s.id,
                                k + 1,
                                w.len(),
                                gammas[k].len()
                            )));
                        }
                        hazards.push(expit(w.dot(&gammas[k])));
                        predictors.push(w);
                    }
                    Ok(SubjectWeights::from_hazards(
                        path.censor,
                        &path.times()[..n_eff],
                        &hazards,
                        with_derivatives.then_some(predictors.as_slice()),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightTable { n_events: data.n_events, subjects, has_derivatives: with_derivatives })
}

/// Degenerate weights from the true outcomes of every subject.
pub fn degenerate_weight_table(data: &StudyDataset) -> Result<WeightTable> {
    let subjects = data
        .subjects
        .iter()
        .map(|s| s.events.iter().map(SubjectWeights::degenerate).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightTable { n_events: data.n_events, subjects, has_derivatives: false })
}

/// Audit dump: `subject_id,event_type,time,h,weight,N_tilde,Y_tilde`.
pub fn write_weight_table<W: Write>(table: &WeightTable, data: &StudyDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["subject_id", "event_type", "time", "h", "weight", "N_tilde", "Y_tilde"])?;
    for (s, weights) in data.subjects.iter().zip(&table.subjects) {
        for (k, sw) in weights.iter().enumerate() {
            for r in &sw.rows {
                wtr.write_record([
                    s.id.clone(),
                    (k + 1).to_string(),
                    data.time_value(r.time).to_string(),
                    r.hazard.to_string(),
                    r.weight.to_string(),
                    r.n_tilde.to_string(),
                    r.y_tilde.to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuestionnaireGrid;

    fn times(ts: &[i64]) -> Vec<Time> {
        ts.iter().map(|&t| Time(t)).collect()
    }

    #[test]
    fn hazard_at_origin_and_expit() {
        assert_eq!(hazard_prob(&[0.0, 0.0], &[3.0, -1.0], Time(1)).unwrap(), 0.5);
        assert_eq!(hazard_prob(&[5.0, 2.0], &[1.0, 1.0], Time(0)).unwrap(), 0.0);
        let h = hazard_prob(&[-2.0, 3.0], &[1.0, 1.0], Time(1)).unwrap();
        assert!((h - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((h - 0.7311).abs() < 1e-4);
        assert!(hazard_prob(&[1.0], &[1.0, 2.0], Time(1)).is_err());
    }

    #[test]
    fn hand_evaluated_product_weights() {
        let sw = SubjectWeights::from_hazards(Time(7), &times(&[1, 3, 5]), &[0.2, 0.3, 0.5], None);
        let w: Vec<f64> = sw.rows.iter().map(|r| r.weight).collect();
        for (a, b) in w.iter().zip([0.2, 0.24, 0.28]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((sw.rows[2].n_tilde - 0.72).abs() < 1e-15);
        assert!((sw.rows[2].y_tilde - 0.56).abs() < 1e-15);
        assert!((sw.at_risk(Time(5)).0 - 0.56).abs() < 1e-15);
        assert!((sw.at_risk(Time(6)).0 - 0.28).abs() < 1e-15);
        assert_eq!(sw.at_risk(Time(8)).0, 0.0);
    }

    #[test]
    fn zero_and_absorbing_hazards() {
        let sw = SubjectWeights::from_hazards(Time(5), &times(&[1, 3, 5, 7]), &[0.0; 4], None);
        assert_eq!(sw.rows.len(), 3);
        assert!(sw.rows.iter().all(|r| r.weight == 0.0 && r.n_tilde == 0.0 && r.y_tilde == 1.0));
        let sw = SubjectWeights::from_hazards(Time(7), &times(&[1, 3, 5, 7]), &[1.0, 0.4, 0.4, 0.4], None);
        assert_eq!(sw.rows[0].weight, 1.0);
        assert!(sw.rows[1..].iter().all(|r| r.weight == 0.0 && r.y_tilde == 0.0));
    }

    fn true_path(truth: [bool; 4], censor: i64) -> EventPath {
        EventPath::new(
            Time(censor),
            QuestionnaireGrid::new(times(&[1, 3, 5, 7])).unwrap(),
            truth.to_vec(),
            Some(truth.to_vec()),
            vec![vec![]; 4],
            vec![vec![]; 4],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_weights_reproduce_counting_process() {
        let sw = SubjectWeights::degenerate(&true_path([false, true, true, true], 7)).unwrap();
        let w: Vec<f64> = sw.rows.iter().map(|r| r.weight).collect();
        let y: Vec<f64> = sw.rows.iter().map(|r| r.y_tilde).collect();
        assert_eq!(w, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(y, vec![1.0, 1.0, 0.0, 0.0]);

        let sw = SubjectWeights::degenerate(&true_path([false; 4], 5)).unwrap();
        assert!(sw.rows.iter().all(|r| r.weight == 0.0 && r.y_tilde == 1.0));
        assert_eq!(sw.at_risk(Time(7)).0, 0.0);

        let sw = SubjectWeights::degenerate(&true_path([true; 4], 7)).unwrap();
        let w: Vec<f64> = sw.rows.iter().map(|r| r.weight).collect();
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_derivatives_match_finite_differences() {
        let ts = times(&[1, 3, 5, 7]);
        let ws: Vec<DVector<f64>> =
            (0..4).map(|j| DVector::from_vec(vec![1.0, j as f64 * 0.5, (j % 2) as f64])).collect();
        let gamma = DVector::from_vec(vec![-1.0, 0.3, 0.8]);
        let build = |g: &DVector<f64>| {
            let h: Vec<f64> = ws.iter().map(|w| expit(w.dot(g))).collect();
            SubjectWeights::from_hazards(Time(7), &ts, &h, Some(&ws))
        };
        let base = build(&gamma);
        let eps = 1e-6;
        for c in 0..3 {
            let mut gp = gamma.clone();
            gp[c] += eps;
            let mut gm = gamma.clone();
            gm[c] -= eps;
            let (p, m) = (build(&gp), build(&gm));
            for j in 0..4 {
                let d = base.rows[j].derivatives.as_ref().unwrap();
                let fd_w = (p.rows[j].weight - m.rows[j].weight) / (2.0 * eps);
                let fd_y = (p.rows[j].y_tilde - m.rows[j].y_tilde) / (2.0 * eps);
                let fd_s = (p.rows[j].survival - m.rows[j].survival) / (2.0 * eps);
                assert!((fd_w - d.weight[c]).abs() < 1e-8);
                assert!((fd_y - d.y_tilde[c]).abs() < 1e-8);
                assert!((fd_s - d.survival[c]).abs() < 1e-8);
            }
        }
    }
}
