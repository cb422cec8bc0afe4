//! Small dense-matrix helpers shared by the estimation code.

use nalgebra::{DMatrix, SMatrix};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerance on the smallest eigenvalue below which a covariance is rejected.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// `(M + M^T) / 2`, in place.
pub fn symmetrize<T: Real, const N: usize>(m: &mut SMatrix<T, N, N>) {
    let half = T::lit(0.5);
    for i in 0..N {
        for j in (i + 1)..N {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrize_dyn<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest `|M_ij - M_ji|`.
pub fn max_asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    m.clone().symmetric_eigenvalues().min()
}

pub fn to_dyn<T: Real, const R: usize, const C: usize>(m: &SMatrix<T, R, C>) -> DMatrix<T> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

pub fn from_dyn<T: Real, const R: usize, const C: usize>(m: &DMatrix<T>) -> SMatrix<T, R, C> {
    SMatrix::<T, R, C>::from_column_slice(m.as_slice())
}

/// Replaces negative eigenvalues by zero. Leaves the matrix untouched when it
/// is already PSD so that round-off is not introduced needlessly.
pub fn clamp_psd<T: Real>(m: &mut DMatrix<T>) {
    if m.nrows() == 0 {
        return;
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= T::zero() {
        return;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(T::zero()));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    *m = rebuilt;
    symmetrize_dyn(m);
}

/// Returns `S` with `S S^T = M` for a symmetric PSD `M`.
///
/// Cholesky is tried first; a semidefinite matrix falls back to the
/// eigendecomposition `V sqrt(max(Λ, 0))`. Eigenvalues below
/// `-PSD_TOLERANCE * max(1, tr M)` are rejected.
pub fn psd_sqrt<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch { expected: n, actual: m.ncols() });
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let scale = m.trace().abs().max(T::one());
    if min < -T::lit(PSD_TOLERANCE) * scale {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min.as_f64() });
    }
    let roots = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Checks symmetry and positive semidefiniteness within the crate tolerances.
pub fn check_covariance<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
    }
    let scale = m.amax().max(T::one());
    if max_asymmetry(m) > T::lit(PSD_TOLERANCE) * scale {
        return Err(Error::InvalidArgument("covariance is not symmetric".into()));
    }
    let min = min_eigenvalue(m);
    if min < -T::lit(PSD_TOLERANCE) * scale {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min.as_f64() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn sqrt_of_singular_matrix_uses_eigen_fallback() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 0.0, 1.0]));
        let s = psd_sqrt(&m).unwrap();
        assert!((&s * s.transpose() - &m).amax() < 1e-12);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(psd_sqrt(&m), Err(Error::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn clamp_removes_negative_eigenvalues() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        clamp_psd(&mut m);
        assert!(min_eigenvalue(&m) >= -1e-12);
        assert!(max_asymmetry(&m) == 0.0);
    }

    #[test]
    fn symmetrize_fixed() {
        let mut m = Matrix3::new(1.0, 2.0, 0.0, 4.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(m[(1, 0)], 3.0);
    }
}
