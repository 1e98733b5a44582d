//! Small dense helpers on top of nalgebra for symmetric matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Symmetrize in place to remove roundoff asymmetry.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let ev = SymmetricEigen::new(s).eigenvalues;
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    eig_extremes(m).1
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    eig_extremes(m).0
}

/// Spectral norm of a general matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    lambda_max(&(m.transpose() * m)).max(0.0).sqrt()
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// Returns true when `m` is symmetric (to a relative tolerance) and its Cholesky succeeds.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.nrows() == 0 {
        return false;
    }
    let scale = m.amax().max(1e-300);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return false;
    }
    m.iter().all(|v| v.is_finite()) && m.clone().cholesky().is_some()
}

/// Inverse of an SPD matrix via Cholesky; `None` if not positive definite.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut inv = m.clone().cholesky()?.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

pub fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}
