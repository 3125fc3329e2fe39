use nalgebra::{DMatrix, SymmetricEigen};

/// Relative eigenvalue floor used by every symmetric inversion.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Moore–Penrose inverse of a symmetric matrix via eigen-decomposition.
/// Eigenvalues at or below `rel_floor · λ_max` are treated as zero.
pub fn sym_pinv(m: &DMatrix<f64>, rel_floor: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    if lmax <= 0.0 || !lmax.is_finite() {
        return out;
    }
    let floor = rel_floor * lmax;
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > floor {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, l| a.max(l.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let inv = sym_pinv(&a, EIGEN_FLOOR);
        let id = &a * &inv;
        assert!((id - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn pinv_drops_null_space() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = sym_pinv(&a, EIGEN_FLOOR);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!((&a * &p * &a - &a).abs().max() < 1e-12);
    }
}
