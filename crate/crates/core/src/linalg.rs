//! Small dense helpers shared by the filters and the moment propagation.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// `I_n ⊗ block`.
pub fn kron_eye(n: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::<f64>::identity(n, n).kronecker(block)
}

/// `block ⊗ I_m`.
pub fn kron_with_eye(block: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    block.kronecker(&DMatrix::<f64>::identity(m, m))
}

/// Replaces `p` by `(p + pᵀ)/2`.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
}

/// Frobenius-norm relative asymmetry `‖S − Sᵀ‖ / ‖S‖` (0 for the zero matrix).
pub fn asymmetry(s: &DMatrix<f64>) -> f64 {
    let norm = s.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (s - s.transpose()).norm() / norm
}

/// `‖a − b‖ / max(‖b‖, floor)` in the Frobenius norm.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_estimate(s: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(s.clone());
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Computes `rhs · S⁻¹` for a symmetric `S` without forming the inverse.
///
/// Cholesky is tried first; a covariance that rounding has pushed off definiteness falls
/// back to a pivoted LU solve. Only a singular `S` is an error. `step` labels the error.
pub fn solve_spd_right(rhs: &DMatrix<f64>, s: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let singular = || Error::SingularInnovation {
        step,
        condition: condition_estimate(s),
    };
    let solved = match Cholesky::new(s.clone()) {
        Some(chol) => chol.solve(&rhs.transpose()),
        None => s.clone().lu().solve(&rhs.transpose()).ok_or_else(singular)?,
    };
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(solved.transpose())
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix, treating eigenvalues below
/// `rel_cutoff · λ_max` as exact zeros.
pub fn psd_pinv(s: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let eig = SymmetricEigen::new(s.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let mut out = DMatrix::zeros(n, n);
    if lmax <= 0.0 {
        return out;
    }
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > rel_cutoff * lmax {
            let u = eig.eigenvectors.column(k);
            out += (u * u.transpose()) / lam;
        }
    }
    out
}
