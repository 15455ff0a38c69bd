//! Small dense-matrix helpers used throughout the solvers.

use nalgebra::{DMatrix, SymmetricEigen};

/// Replace `m` by its symmetric part (m + m^T)/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Frobenius norm of the antisymmetric part.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig_sym(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v))
}

/// Project a symmetric matrix onto the PSD cone by flooring eigenvalues.
pub fn psd_floor(m: &mut DMatrix<f64>, floor: f64) {
    symmetrize(m);
    if min_eig_sym(m) >= floor {
        return;
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let vecs = eig.eigenvectors;
    *m = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
    symmetrize(m);
}

/// Condition number estimate ||M|| * ||M^{-1}|| (Frobenius); infinite when singular.
pub fn cond_estimate(m: &DMatrix<f64>) -> f64 {
    match m.clone().try_inverse() {
        Some(inv) => m.norm() * inv.norm(),
        None => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_floor_clips_negative_modes() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        psd_floor(&mut m, 0.0);
        assert!(min_eig_sym(&m) >= -1e-14);
        assert!((m[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(m[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn psd_floor_keeps_psd_matrices() {
        let m0 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let mut m = m0.clone();
        psd_floor(&mut m, 0.0);
        assert!((m - m0).norm() < 1e-12);
    }

    #[test]
    fn cond_of_identity_is_n() {
        let m = DMatrix::<f64>::identity(3, 3);
        assert!((cond_estimate(&m) - 3.0).abs() < 1e-12);
    }
}
