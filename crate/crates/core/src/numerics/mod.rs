//! Dense linear algebra, seeded randomness and Gaussian sampling.
//!
//! Everything is `f64`; checkpoints narrow to `f32` only at the file boundary.

mod gaussian;
mod matrix;
mod rng;
mod sum;

pub use gaussian::{cholesky, sample_gaussian, sampling_factor, CHOLESKY_JITTER, PIVOT_FLOOR};
pub use matrix::{argmax, dot, l2_norm, Matrix};
pub use rng::Rng;
pub use sum::exact_sum;

use crate::error::{MosError, Result};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const NORM_EPS: f64 = 1e-12;

/// `aᵀb / (‖a‖‖b‖)`, or 0 when either vector is (numerically) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MosError::dims(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_degenerate_and_mismatch() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}
