use super::{Matrix, Rng};
use crate::error::{MosError, Result};

/// Diagonal jitter added before every factorization.
pub const CHOLESKY_JITTER: f64 = 1e-9;

/// A pivot (before the square root) at or below this value fails the factorization.
pub const PIVOT_FLOOR: f64 = 1e-3 * CHOLESKY_JITTER;

/// Lower-triangular `L` with `L Lᵀ = sigma + jitter·I`.
///
/// Singular but positive semi-definite inputs (for instance the covariance of a
/// class with fewer samples than dimensions) factor successfully thanks to the
/// jitter. Matrices with a genuinely negative direction do not.
pub fn cholesky(sigma: &Matrix) -> Result<Matrix> {
    let n = sigma.rows();
    if sigma.cols() != n {
        return Err(MosError::dims(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            sigma.cols()
        )));
    }
    if !sigma.is_symmetric(1e-9) {
        return Err(MosError::InvalidInput("cholesky input is not symmetric".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = sigma[(j, j)] + CHOLESKY_JITTER;
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot.is_nan() || pivot <= PIVOT_FLOOR {
            return Err(MosError::NotPositiveDefinite { row: j, pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / diag;
        }
    }
    Ok(l)
}

/// Factor used for sampling: the Cholesky factor when it exists, otherwise the
/// square root of the clamped diagonal (independent per-dimension sampling).
pub fn sampling_factor(sigma: &Matrix) -> Result<Matrix> {
    match cholesky(sigma) {
        Ok(l) => Ok(l),
        Err(MosError::NotPositiveDefinite { .. }) => {
            let n = sigma.rows();
            let mut l = Matrix::zeros(n, n);
            for i in 0..n {
                l[(i, i)] = sigma[(i, i)].max(0.0).sqrt();
            }
            Ok(l)
        }
        Err(e) => Err(e),
    }
}

/// Draws `n` vectors `mu + L z` with `z ~ N(0, I)`.
///
/// Each sample consumes exactly `dim` standard-normal draws from `rng`, in order.
pub fn sample_gaussian(mu: &[f64], chol_lower: &Matrix, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let d = mu.len();
    if chol_lower.shape() != (d, d) {
        return Err(MosError::dims(format!(
            "mean of length {d} with {}x{} factor",
            chol_lower.rows(),
            chol_lower.cols()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.standard_normal());
        let mut x = mu.to_vec();
        for (i, xi) in x.iter_mut().enumerate() {
            let row = chol_lower.row(i);
            *xi += row[..=i].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        }
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(l: &Matrix) -> Matrix {
        l.matmul(&l.transpose()).unwrap()
    }

    #[test]
    fn identity_factors_to_identity() {
        let l = cholesky(&Matrix::identity(2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((l[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        let l = cholesky(&Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-9);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-9);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn indefinite_is_rejected() {
        let err = cholesky(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap_err();
        assert!(matches!(err, MosError::NotPositiveDefinite { row: 1, .. }));
    }

    #[test]
    fn zero_covariance_factors_with_jitter() {
        let l = cholesky(&Matrix::zeros(3, 3)).unwrap();
        assert!(reconstruct(&l).frobenius_norm() < 1e-8);
    }

    #[test]
    fn asymmetric_is_rejected() {
        assert!(cholesky(&Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]])).is_err());
        assert!(cholesky(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn fallback_uses_diagonal() {
        let l = sampling_factor(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0 - 10.0]])).unwrap();
        assert_eq!(l[(0, 0)], 1.0);
        assert_eq!(l[(1, 1)], 0.0);
        assert_eq!(l[(1, 0)], 0.0);
    }

    #[test]
    fn empty_and_degenerate_sampling() {
        let mut rng = Rng::new(3);
        assert!(sample_gaussian(&[1.0, 2.0], &Matrix::identity(2), 0, &mut rng)
            .unwrap()
            .is_empty());
        let draws = sample_gaussian(&[1.0, -2.0], &Matrix::zeros(2, 2), 5, &mut rng).unwrap();
        assert!(draws.iter().all(|x| x == &vec![1.0, -2.0]));
        assert!(sample_gaussian(&[1.0], &Matrix::identity(2), 1, &mut rng).is_err());
    }

    #[test]
    fn standard_normal_mean_concentrates() {
        let mut rng = Rng::new(11);
        let n = 10_000;
        let draws = sample_gaussian(&[0.0; 4], &Matrix::identity(4), n, &mut rng).unwrap();
        for dim in 0..4 {
            let mean = draws.iter().map(|x| x[dim]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "dim {dim} mean {mean}");
        }
    }
}
