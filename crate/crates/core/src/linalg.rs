//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which inversion falls back to the pseudo-inverse.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative tolerance for negative eigenvalues that are projected away.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Inverse through an SVD. Ill-conditioned matrices get the Moore-Penrose
/// pseudo-inverse (with a warning); a zero matrix is an error.
pub fn robust_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: cannot invert a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what}: non-finite entries")));
    }
    let svd = m.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_max <= 0.0 {
        return Err(Error::Singular(format!("{what}: zero matrix")));
    }
    let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    let cutoff = if cond > MAX_CONDITION {
        log::warn!("{what}: condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}, using pseudo-inverse");
        s_max / MAX_CONDITION
    } else {
        0.0
    };
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let uk = u.column(k);
            let vk = v_t.row(k);
            out += (vk.transpose() * uk.transpose()) / s;
        }
    }
    Ok(out)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m`, then clips eigenvalues in `[-tol * ||m||_2, 0)` to zero.
/// Anything more negative is an error.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min_eigen = eig.eigenvalues.min();
    if min_eigen >= 0.0 {
        return Ok(sym);
    }
    if min_eigen < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd { min_eigen, scale });
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    Ok(symmetrize(&out))
}

/// `a^{-1} b a^{-T}`.
pub fn sandwich(bread_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    bread_inv * meat * bread_inv.transpose()
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

/// Sum of outer products `sum_i a_i b_i^T`.
pub fn outer_sum(a: &[DVector<f64>], b: &[DVector<f64>]) -> DMatrix<f64> {
    let p = a.first().map_or(0, |v| v.len());
    let q = b.first().map_or(0, |v| v.len());
    let mut out = DMatrix::zeros(p, q);
    for (x, y) in a.iter().zip(b) {
        out += x * y.transpose();
    }
    out
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_well_conditioned_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = robust_inverse(&m, "test").unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_pseudo_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let pinv = robust_inverse(&m, "test").unwrap();
        // pinv of the all-ones 2x2 is all 0.25
        assert!((pinv - DMatrix::from_element(2, 2, 0.25)).abs().max() < 1e-12);
        assert!(robust_inverse(&DMatrix::zeros(2, 2), "zero").is_err());
    }

    #[test]
    fn psd_projection_clips_noise_and_rejects_large_violations() {
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 1e-12, 1.0, 1.0]);
        let p = project_psd(&tiny).unwrap();
        assert!(p.clone().symmetric_eigen().eigenvalues.min() >= -1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(project_psd(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(1, 2, 1.0);
        let b = DMatrix::from_element(2, 1, 2.0);
        let m = block_diag(&[a, b]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(2, 2)], 2.0);
        assert_eq!(m[(0, 2)], 0.0);
    }
}
