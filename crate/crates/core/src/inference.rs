//! Sandwich inference for the weighted estimator.
//!
//! Parameters are stacked as `(beta_1, ..., beta_K, gamma_1, ..., gamma_K)`.
//! With `rho = n_V / n_M`,
//!
//! ```text
//! A = | A_bb  A_bg |      B = | B_b         B_bg     |
//!     |  0    A_gg |          | B_bg'   (1/rho) B_g  |
//! ```
//!
//! and `cov = A^{-1} B A^{-T} / n_M`. `B_bg` is zero for an external
//! validation study and is estimated from the shared subjects otherwise.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{StudyDataset, StudyDesign};
use crate::error::{Error, Result};
use crate::linalg;
use crate::me_model::MeModelFit;
use crate::weights::build_weight_table;
use crate::wlw_standard::{fit_wlw, EventFit, FitResult, OutcomeSource};
use crate::wlw_weighted::{self, RiskPanel, SliceSums};
use crate::Ties;

/// How `dU/dgamma` is obtained.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaJacobian {
    #[default]
    Analytic,
    /// Central differences with step `1e-5` on each gamma component.
    FiniteDifference,
}

pub const FD_STEP: f64 = 1e-5;

/// Per-subject contributions `phi~*_i` to the weighted score of one event,
/// in panel subject order. They sum to `n U(beta)`.
pub fn phi_tilde_star(panel: &RiskPanel, beta: &DVector<f64>, ties: Ties) -> Vec<DVector<f64>> {
    let p = panel.dim;
    let mut out = vec![DVector::zeros(p); panel.n_subjects];
    for slice in &panel.slices {
        let d_total = slice.total_weight;
        if d_total == 0.0 {
            continue;
        }
        let sums = SliceSums::new(slice, beta, false);
        let fractions = slice.fractions(ties);
        let nr = fractions.len() as f64;
        let (mut alpha0, mut alpha1) = (0.0, 0.0);
        let (mut v0, mut v1) = (DVector::zeros(p), DVector::zeros(p));
        let mut zbar_avg = DVector::zeros(p);
        let mut zbar = DVector::zeros(p);
        for &f in &fractions {
            let s0 = sums.mean_at(f, &mut zbar);
            alpha0 += 1.0 / s0;
            alpha1 += f / s0;
            v0.axpy(1.0 / s0, &zbar, 1.0);
            v1.axpy(f / s0, &zbar, 1.0);
            zbar_avg.axpy(1.0 / nr, &zbar, 1.0);
        }
        for (e, &ex) in slice.entries.iter().zip(&sums.exp_eta) {
            let o = &mut out[e.subject];
            if e.weight != 0.0 {
                o.axpy(e.weight, &(&e.z - &zbar_avg), 1.0);
            }
            let c = d_total / nr * e.y_tilde * ex;
            let comp = &e.z * (alpha0 - e.hazard * alpha1) - (&v0 - &v1 * e.hazard);
            o.axpy(-c, &comp, 1.0);
        }
    }
    out
}

/// `(1/n) dU/dgamma` by central differences, rebuilding the weights of
/// event `k` at perturbed coefficients.
pub fn score_gamma_jacobian_fd(
    data: &StudyDataset,
    me: &MeModelFit,
    k: usize,
    beta: &DVector<f64>,
    ties: Ties,
) -> Result<DMatrix<f64>> {
    let q = me.events[k].dim();
    let mut out = DMatrix::zeros(beta.len(), q);
    let score_at = |gamma: Vec<f64>| -> Result<DVector<f64>> {
        let mut shifted = me.clone();
        shifted.events[k].fit.gamma = gamma;
        let table = build_weight_table(data, &shifted, false)?;
        let panel = RiskPanel::build(data, &table, k)?;
        Ok(wlw_weighted::evaluate(&panel, beta, ties, false).score / data.len() as f64)
    };
    for c in 0..q {
        let mut up = me.events[k].fit.gamma.clone();
        let mut down = up.clone();
        up[c] += FD_STEP;
        down[c] -= FD_STEP;
        let col = (score_at(up)? - score_at(down)?) / (2.0 * FD_STEP);
        out.set_column(c, &col);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct JointCovariance {
    pub design: StudyDesign,
    pub rho: f64,
    pub n_main: usize,
    pub n_validation: usize,
    pub beta: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Covariance of the full stacked `(beta, gamma)`.
    pub full: DMatrix<f64>,
    /// Upper-left `beta` block.
    pub cov: DMatrix<f64>,
    /// Per-event `(1/n_M) dU_k/dgamma_k`.
    pub a_beta_gamma: Vec<DMatrix<f64>>,
    /// Stacked `phi~*` per main subject.
    pub phi: Vec<DVector<f64>>,
}

impl JointCovariance {
    pub fn se(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Options for the joint sandwich.
#[derive(Copy, Clone, Debug, Default)]
pub struct SandwichOptions {
    pub gamma_jacobian: GammaJacobian,
    /// Overrides `n_V / n_M`; `f64::INFINITY` treats gamma as known.
    pub rho: Option<f64>,
}

fn stacked_phi(panels: &[RiskPanel], fits: &[EventFit], ties: Ties) -> Vec<DVector<f64>> {
    let per_event: Vec<Vec<DVector<f64>>> = panels
        .par_iter()
        .zip(fits)
        .map(|(panel, fit)| phi_tilde_star(panel, &DVector::from_vec(fit.beta.clone()), ties))
        .collect();
    let n = panels.first().map_or(0, |p| p.n_subjects);
    (0..n)
        .map(|i| linalg::stack(&per_event.iter().map(|v| v[i].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Joint sandwich covariance of the weighted estimates and the error-model
/// coefficients. `shared` pairs main-subject and validation-subject indices
/// of subjects in both studies (empty for an external validation study).
#[allow(clippy::too_many_arguments)]
fn joint_sandwich(
    design: StudyDesign,
    main: &StudyDataset,
    me: &MeModelFit,
    panels: &[RiskPanel],
    fits: &[EventFit],
    ties: Ties,
    opts: SandwichOptions,
    shared: &[(usize, usize)],
) -> Result<JointCovariance> {
    let n_m = main.len();
    let n_v = me.n_validation;
    if n_m == 0 || n_v == 0 {
        return Err(Error::Invalid("empty main or validation study".into()));
    }
    if panels.len() != me.events.len() || fits.len() != panels.len() {
        return Err(Error::Dimension("event counts of fits and error model differ".into()));
    }
    let rho = opts.rho.unwrap_or(n_v as f64 / n_m as f64);
    if !(rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let nm = n_m as f64;
    let nv = n_v as f64;

    let mut a_bb = Vec::with_capacity(panels.len());
    let mut a_bg = Vec::with_capacity(panels.len());
    for (k, (panel, fit)) in panels.iter().zip(fits).enumerate() {
        let beta = DVector::from_vec(fit.beta.clone());
        a_bb.push(wlw_weighted::score_jacobian(panel, &beta, ties));
        a_bg.push(match opts.gamma_jacobian {
            GammaJacobian::Analytic => wlw_weighted::score_gamma_jacobian(panel, &beta, ties)?,
            GammaJacobian::FiniteDifference => score_gamma_jacobian_fd(main, me, k, &beta, ties)?,
        });
    }
    let a_gg: Vec<DMatrix<f64>> = me.events.iter().map(|e| -&e.fit.information / nv).collect();
    let a11 = linalg::block_diag(&a_bb);
    let a12 = linalg::block_diag(&a_bg);
    let a22 = linalg::block_diag(&a_gg);
    let (pb, pg) = (a11.nrows(), a22.nrows());
    if a12.shape() != (pb, pg) {
        return Err(Error::Dimension(format!(
            "dU/dgamma is {:?}, expected {:?}",
            a12.shape(),
            (pb, pg)
        )));
    }
    let mut a = DMatrix::zeros(pb + pg, pb + pg);
    a.view_mut((0, 0), (pb, pb)).copy_from(&a11);
    a.view_mut((0, pb), (pb, pg)).copy_from(&a12);
    a.view_mut((pb, pb), (pg, pg)).copy_from(&a22);

    let phi = stacked_phi(panels, fits, ties);
    let pi = me.stacked_scores();
    let mut b = DMatrix::zeros(pb + pg, pb + pg);
    b.view_mut((0, 0), (pb, pb)).copy_from(&(linalg::outer_sum(&phi, &phi) / nm));
    if rho.is_finite() {
        b.view_mut((pb, pb), (pg, pg)).copy_from(&(linalg::outer_sum(&pi, &pi) / nv / rho));
        if !shared.is_empty() {
            let (ph, ps): (Vec<_>, Vec<_>) =
                shared.iter().map(|&(i, l)| (phi[i].clone(), pi[l].clone())).unzip();
            let cross = linalg::outer_sum(&ph, &ps) / nv;
            b.view_mut((0, pb), (pb, pg)).copy_from(&cross);
            b.view_mut((pb, 0), (pg, pb)).copy_from(&cross.transpose());
        }
    }

    let a_inv = linalg::robust_inverse(&a, "joint sandwich bread")?;
    let full = linalg::project_psd(&(linalg::sandwich(&a_inv, &b) / nm))?;
    let cov = full.view((0, 0), (pb, pb)).into_owned();
    let beta = DVector::from_iterator(pb, fits.iter().flat_map(|f| f.beta.iter().copied()));
    Ok(JointCovariance {
        design,
        rho,
        n_main: n_m,
        n_validation: n_v,
        beta,
        a,
        b,
        full,
        cov,
        a_beta_gamma: a_bg,
        phi,
    })
}

/// External validation study: the two studies share no subjects.
pub fn evs_joint_cov(
    main: &StudyDataset,
    me: &MeModelFit,
    panels: &[RiskPanel],
    fits: &[EventFit],
    ties: Ties,
    opts: SandwichOptions,
) -> Result<JointCovariance> {
    joint_sandwich(StudyDesign::External, main, me, panels, fits, ties, opts, &[])
}

fn index_by_id(data: &StudyDataset) -> HashMap<&str, usize> {
    data.subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

/// Weights with derivatives, panels and weighted fits for every event.
pub fn weighted_stage(
    data: &StudyDataset,
    me: &MeModelFit,
    ties: Ties,
) -> Result<(Vec<RiskPanel>, Vec<EventFit>)> {
    let table = build_weight_table(data, me, true)?;
    wlw_weighted::fit_weighted(data, &table, ties)
}

/// Internal validation, full calibration: every main subject (validation
/// subjects included) is analysed through its weights; true outcomes enter
/// only through the error model. The score covariance between validation
/// subjects' WLW and error-model contributions is included.
pub fn ivs_full_calibration(
    main: &StudyDataset,
    validation: &StudyDataset,
    me: &MeModelFit,
    ties: Ties,
    opts: SandwichOptions,
) -> Result<JointCovariance> {
    let (panels, fits) = weighted_stage(main, me, ties)?;
    let by_id = index_by_id(main);
    let shared: Vec<(usize, usize)> = validation
        .subjects
        .iter()
        .enumerate()
        .filter_map(|(l, s)| by_id.get(s.id.as_str()).map(|&i| (i, l)))
        .collect();
    joint_sandwich(StudyDesign::Internal, main, me, &panels, &fits, ties, opts, &shared)
}

/// Inverse-variance pooled estimate under internal validation.
#[derive(Clone, Debug)]
pub struct PooledResult {
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub beta_validation: DVector<f64>,
    pub cov_validation: DMatrix<f64>,
    pub beta_main: DVector<f64>,
    pub cov_main: DMatrix<f64>,
    /// `Cov(beta^M, beta^V)`.
    pub cov_cross: DMatrix<f64>,
    pub validation_fit: FitResult,
    pub main_fits: Vec<EventFit>,
}

/// `(S_V^{-1} + S_M^{-1})^{-1} (S_V^{-1} b_V + S_M^{-1} b_M)` with the
/// delta-method covariance given `Cov(b_M, b_V) = cross`.
pub fn pool_estimates(
    b_v: &DVector<f64>,
    s_v: &DMatrix<f64>,
    b_m: &DVector<f64>,
    s_m: &DMatrix<f64>,
    cross: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let iv = linalg::robust_inverse(s_v, "validation-only covariance")?;
    let im = linalg::robust_inverse(s_m, "main-study covariance")?;
    let w = linalg::robust_inverse(&(&iv + &im), "pooled precision")?;
    let c_v = &w * &iv;
    let c_m = &w * &im;
    let beta = &c_v * b_v + &c_m * b_m;
    let cov = &c_m * s_m * c_m.transpose()
        + &c_v * s_v * c_v.transpose()
        + &c_m * cross * c_v.transpose()
        + &c_v * cross.transpose() * c_m.transpose();
    Ok((beta, linalg::project_psd(&cov)?))
}

/// `main_rest` is the main study without the validation subjects; `me` was
/// fitted on `validation` (same subject order).
pub fn ivs_pooled(
    main_rest: &StudyDataset,
    validation: &StudyDataset,
    me: &MeModelFit,
    ties: Ties,
    opts: SandwichOptions,
) -> Result<PooledResult> {
    let ids: HashSet<&str> = validation.subjects.iter().map(|s| s.id.as_str()).collect();
    if main_rest.subjects.iter().any(|s| ids.contains(s.id.as_str())) {
        return Err(Error::Invalid("pooled estimator needs disjoint main and validation parts".into()));
    }
    if me.n_validation != validation.len() {
        return Err(Error::Dimension("error model was not fitted on this validation set".into()));
    }
    let validation_fit = fit_wlw(validation, ties, OutcomeSource::TrueStatus).map_err(|e| match e {
        Error::Degenerate(msg) => Error::PoolingUnavailable(format!(
            "{msg} in the validation study; pooling unavailable, full calibration recommended"
        )),
        other => other,
    })?;
    let (panels, main_fits) = weighted_stage(main_rest, me, ties)?;
    let n_r = main_rest.len() as f64;

    // Linearizations, unnormalized: b_M - b = (-H)^{-1} [sum phi + G (g - g0)],
    // g - g0 = J^{-1} sum pi, b_V - b = I_V^{-1} sum r.
    let mut neg_h = Vec::new();
    let mut g = Vec::new();
    for (k, (panel, fit)) in panels.iter().zip(&main_fits).enumerate() {
        let beta = DVector::from_vec(fit.beta.clone());
        neg_h.push(-wlw_weighted::score_jacobian(panel, &beta, ties) * n_r);
        g.push(
            match opts.gamma_jacobian {
                GammaJacobian::Analytic => wlw_weighted::score_gamma_jacobian(panel, &beta, ties)?,
                GammaJacobian::FiniteDifference => score_gamma_jacobian_fd(main_rest, me, k, &beta, ties)?,
            } * n_r,
        );
    }
    let neg_h_inv = linalg::robust_inverse(&linalg::block_diag(&neg_h), "weighted information")?;
    let g = linalg::block_diag(&g);
    let j_inv = linalg::robust_inverse(
        &linalg::block_diag(&me.events.iter().map(|e| e.fit.information.clone()).collect::<Vec<_>>()),
        "error-model information",
    )?;
    let gamma_known = opts.rho.is_some_and(f64::is_infinite);
    let to_beta_m = &neg_h_inv * &g * &j_inv;
    let phi = stacked_phi(&panels, &main_fits, ties);
    let pi = me.stacked_scores();

    let t_v = &validation_fit.bread;

    let infl_m_rest: Vec<DVector<f64>> = phi.iter().map(|f| &neg_h_inv * f).collect();
    let infl_m_valid: Vec<DVector<f64>> = pi
        .iter()
        .map(|p| if gamma_known { DVector::zeros(to_beta_m.nrows()) } else { &to_beta_m * p })
        .collect();
    let infl_v: Vec<DVector<f64>> = validation_fit.residuals.iter().map(|r| t_v * r).collect();

    let cov_main = linalg::project_psd(
        &(linalg::outer_sum(&infl_m_rest, &infl_m_rest) + linalg::outer_sum(&infl_m_valid, &infl_m_valid)),
    )?;
    let cov_validation = validation_fit.cov.clone();
    let cov_cross = linalg::outer_sum(&infl_m_valid, &infl_v);

    let beta_validation = validation_fit.beta();
    let beta_main =
        DVector::from_iterator(beta_validation.len(), main_fits.iter().flat_map(|f| f.beta.iter().copied()));
    let (beta, cov) = pool_estimates(&beta_validation, &cov_validation, &beta_main, &cov_main, &cov_cross)?;
    Ok(PooledResult {
        beta,
        cov,
        beta_validation,
        cov_validation,
        beta_main,
        cov_main,
        cov_cross,
        validation_fit,
        main_fits,
    })
}

/// Wald test of equal effects for two event types.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct WaldTest {
    pub z: f64,
    pub p: f64,
}

pub fn wald_equal_effects(beta: [f64; 2], cov: &DMatrix<f64>) -> Result<WaldTest> {
    if cov.shape() != (2, 2) {
        return Err(Error::Dimension(format!("Wald test needs a 2x2 covariance, got {:?}", cov.shape())));
    }
    let var = cov[(0, 0)] + cov[(1, 1)] - cov[(0, 1)] - cov[(1, 0)];
    if !(var > 0.0) {
        return Err(Error::Singular(format!("variance of the difference is {var}")));
    }
    let z = (beta[0] - beta[1]) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    Ok(WaldTest { z, p })
}

/// Wald test between events `k1` and `k2` on covariate component `m` of a
/// stacked estimate with equal covariate dimension `p` per event.
pub fn wald_between(beta: &DVector<f64>, cov: &DMatrix<f64>, p: usize, k1: usize, k2: usize, m: usize) -> Result<WaldTest> {
    let (i, j) = (k1 * p + m, k2 * p + m);
    if i >= beta.len() || j >= beta.len() {
        return Err(Error::Dimension("Wald test index out of range".into()));
    }
    let sub = DMatrix::from_row_slice(2, 2, &[cov[(i, i)], cov[(i, j)], cov[(j, i)], cov[(j, j)]]);
    wald_equal_effects([beta[i], beta[j]], &sub)
}
