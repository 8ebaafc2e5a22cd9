//! End-to-end fit: error model, weights, weighted WLW and design-specific
//! inference, with a JSON rendering of the results.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{StudyDataset, StudyDesign};
use crate::error::{Error, Result};
use crate::inference::{
    evs_joint_cov, ivs_full_calibration, ivs_pooled, wald_between, weighted_stage, GammaJacobian,
    PooledResult, SandwichOptions,
};
use crate::me_model::{fit_me_model, MeModelFit, MeModelSpec, PredictorSet};
use crate::wlw_standard::{fit_wlw, EventFit, FitResult, OutcomeSource};
use crate::Ties;

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Design {
    #[serde(rename = "evs")]
    Evs,
    #[serde(rename = "ivs-full")]
    IvsFull,
    #[serde(rename = "ivs-pooled")]
    IvsPooled,
}

impl Design {
    pub fn study_design(self) -> StudyDesign {
        match self {
            Design::Evs => StudyDesign::External,
            Design::IvsFull | Design::IvsPooled => StudyDesign::Internal,
        }
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "evs" => Ok(Design::Evs),
            "ivs-full" => Ok(Design::IvsFull),
            "ivs-pooled" => Ok(Design::IvsPooled),
            other => Err(Error::Config(format!("unknown design {other:?} (evs, ivs-full, ivs-pooled)"))),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Evs => "evs",
            Design::IvsFull => "ivs-full",
            Design::IvsPooled => "ivs-pooled",
        })
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub design: Design,
    pub ties: Ties,
    pub predictors: PredictorSet,
    pub gamma_jacobian: GammaJacobian,
    /// Expected number of event types, checked against both files.
    pub events: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            design: Design::Evs,
            ties: Ties::Efron,
            predictors: PredictorSet::standard(),
            gamma_jacobian: GammaJacobian::Analytic,
            events: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub design: Design,
    pub ties: Ties,
    pub n_main: usize,
    pub n_validation: usize,
    pub n_events: usize,
    pub covariate_dim: usize,
    pub me: MeModelFit,
    /// Weighted fits behind the reported estimate (main-minus-validation
    /// for the pooled design).
    pub weighted: Vec<EventFit>,
    /// Standard WLW on the validation study's true outcomes, when estimable.
    pub validation_wlw: Option<FitResult>,
    pub pooled: Option<PooledResult>,
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_events(data: &StudyDataset, what: &str, expected: Option<usize>) -> Result<()> {
    data.validate()?;
    if let Some(k) = expected {
        if data.n_events != k {
            return Err(Error::Config(format!("{what} has {} event types, expected {k}", data.n_events)));
        }
    }
    Ok(())
}

pub fn run_fit(main: &StudyDataset, validation: &StudyDataset, opts: &FitOptions) -> Result<Analysis> {
    check_events(main, "main study", opts.events)?;
    check_events(validation, "validation study", opts.events.or(Some(main.n_events)))?;
    if !validation.has_true_status() {
        return Err(Error::Invalid("validation study lacks true-status paths".into()));
    }
    let main_ids: HashSet<&str> = main.subjects.iter().map(|s| s.id.as_str()).collect();
    let valid_ids: HashSet<&str> = validation.subjects.iter().map(|s| s.id.as_str()).collect();
    match opts.design {
        Design::Evs => {
            let overlap = valid_ids.intersection(&main_ids).count();
            if overlap > 0 {
                log::warn!("{overlap} validation subjects also appear in the main study; an external design assumes disjoint studies");
            }
        }
        Design::IvsFull | Design::IvsPooled => {
            if !valid_ids.is_subset(&main_ids) {
                return Err(Error::Invalid(
                    "validation must be a subset of the main study for an internal design".into(),
                ));
            }
        }
    }

    let spec = MeModelSpec::uniform(opts.predictors.clone(), main.n_events);
    let me = fit_me_model(validation, &spec)?;
    let sandwich = SandwichOptions { gamma_jacobian: opts.gamma_jacobian, rho: None };
    let validation_wlw = match fit_wlw(validation, opts.ties, OutcomeSource::TrueStatus) {
        Ok(f) => Some(f),
        Err(e) if opts.design != Design::IvsPooled => {
            log::warn!("standard WLW on the validation study unavailable: {e}");
            None
        }
        Err(_) => None,
    };

    let (weighted, pooled, beta, cov) = match opts.design {
        Design::Evs => {
            let (panels, fits) = weighted_stage(main, &me, opts.ties)?;
            let jc = evs_joint_cov(main, &me, &panels, &fits, opts.ties, sandwich)?;
            (fits, None, jc.beta, jc.cov)
        }
        Design::IvsFull => {
            let jc = ivs_full_calibration(main, validation, &me, opts.ties, sandwich)?;
            let (_, fits) = weighted_stage(main, &me, opts.ties)?;
            (fits, None, jc.beta, jc.cov)
        }
        Design::IvsPooled => {
            let rest = main.filter_ids(&valid_ids, false);
            if rest.is_empty() {
                return Err(Error::PoolingUnavailable(
                    "no main-study subjects outside the validation study".into(),
                ));
            }
            let pr = ivs_pooled(&rest, validation, &me, opts.ties, sandwich)?;
            let (b, c) = (pr.beta.clone(), pr.cov.clone());
            (pr.main_fits.clone(), Some(pr), b, c)
        }
    };
    Ok(Analysis {
        design: opts.design,
        ties: opts.ties,
        n_main: main.len(),
        n_validation: validation.len(),
        n_events: main.n_events,
        covariate_dim: main.subjects[0].events[0].covariate_dim(),
        me,
        weighted,
        validation_wlw,
        pooled,
        beta,
        cov,
    })
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn vector_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn se_of(cov: &DMatrix<f64>) -> Vec<f64> {
    cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
}

fn estimate_block(beta: &DVector<f64>, cov: &DMatrix<f64>) -> Value {
    let se = se_of(cov);
    let ci: Vec<[f64; 2]> = beta.iter().zip(&se).map(|(b, s)| [b - Z_975 * s, b + Z_975 * s]).collect();
    json!({
        "beta": vector_json(beta),
        "cov": matrix_json(cov),
        "se": se,
        "ci95": ci,
        "hr": beta.iter().map(|b| b.exp()).collect::<Vec<_>>(),
        "hr_ci95": ci.iter().map(|[l, u]| [l.exp(), u.exp()]).collect::<Vec<_>>(),
    })
}

impl Analysis {
    pub fn labels(&self) -> Vec<String> {
        (1..=self.n_events)
            .flat_map(|k| (1..=self.covariate_dim).map(move |j| format!("event{k}:z_{j}")))
            .collect()
    }

    /// Results document; keys come out sorted.
    pub fn to_json(&self) -> Value {
        let mut out = estimate_block(&self.beta, &self.cov);
        let obj = out.as_object_mut().expect("object");
        obj.insert("design".into(), json!(self.design));
        obj.insert("ties".into(), json!(self.ties));
        obj.insert("n_main".into(), json!(self.n_main));
        obj.insert("n_validation".into(), json!(self.n_validation));
        obj.insert("n_events".into(), json!(self.n_events));
        obj.insert("labels".into(), json!(self.labels()));

        let me_se = se_of(&self.me.joint_cov);
        let mut offset = 0;
        let me_events: Vec<Value> = self
            .me
            .events
            .iter()
            .map(|e| {
                let q = e.dim();
                let se = &me_se[offset..offset + q];
                offset += q;
                json!({
                    "event": e.event,
                    "gamma": e.fit.gamma,
                    "se": se,
                    "iterations": e.fit.iterations,
                    "score_norm": e.fit.score_norm,
                    "n_rows": e.fit.n_rows,
                    "n_cases": e.fit.n_cases,
                })
            })
            .collect();
        obj.insert(
            "me_model".into(),
            json!({ "n_validation": self.me.n_validation, "predictors": self.me.spec, "events": me_events }),
        );
        obj.insert("weighted_wlw".into(), json!({ "events": self.weighted }));
        obj.insert(
            "wlw_standard".into(),
            match &self.validation_wlw {
                Some(f) => {
                    let mut v = estimate_block(&f.beta(), &f.cov);
                    v["events"] = json!(f.events);
                    v["n_subjects"] = json!(f.n_subjects);
                    v["outcome"] = json!(OutcomeSource::TrueStatus);
                    v
                }
                None => Value::Null,
            },
        );
        if let Some(p) = &self.pooled {
            obj.insert(
                "pooled".into(),
                json!({
                    "validation": estimate_block(&p.beta_validation, &p.cov_validation),
                    "main": estimate_block(&p.beta_main, &p.cov_main),
                    "cov_main_validation": matrix_json(&p.cov_cross),
                }),
            );
        }
        let wald = if self.n_events >= 2 && self.covariate_dim >= 1 {
            match wald_between(&self.beta, &self.cov, self.covariate_dim, 0, 1, 0) {
                Ok(w) => json!(w),
                Err(e) => {
                    log::warn!("Wald test unavailable: {e}");
                    Value::Null
                }
            }
        } else {
            Value::Null
        };
        obj.insert("wald_equal".into(), wald);
        out
    }
}
