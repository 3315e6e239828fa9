//! Small dense symmetric positive-definite helpers (Mahalanobis head).

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Lower Cholesky factor of a d x d SPD matrix, or `None` if a pivot is not
/// strictly positive.
pub fn cholesky<R: Real>(a: &[R], d: usize) -> Option<Vec<R>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![R::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = a[i * d + j];
            for k in 0..j {
                acc = acc - l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if acc <= R::zero() || !acc.is_finite() {
                    return None;
                }
                l[i * d + j] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a d x d SPD matrix via its Cholesky factor.
pub fn spd_inverse<R: Real>(a: &[R], d: usize) -> Option<Vec<R>> {
    let l = cholesky(a, d)?;
    // Columns of the inverse: solve L y = e_i, then L^T x = y.
    let mut inv = vec![R::zero(); d * d];
    let mut y = vec![R::zero(); d];
    for col in 0..d {
        for i in 0..d {
            let mut acc = if i == col { R::one() } else { R::zero() };
            for k in 0..i {
                acc = acc - l[i * d + k] * y[k];
            }
            y[i] = acc / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut acc = y[i];
            for k in i + 1..d {
                acc = acc - l[k * d + i] * inv[k * d + col];
            }
            inv[i * d + col] = acc / l[i * d + i];
        }
    }
    // Symmetrize to wash out the asymmetric rounding of the two solves.
    for i in 0..d {
        for j in 0..i {
            let avg = (inv[i * d + j] + inv[j * d + i]) / R::from_f64(2.0);
            inv[i * d + j] = avg;
            inv[j * d + i] = avg;
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let inv = spd_inverse(&eye, 2).unwrap();
        assert_eq!(inv, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..3 {
                    acc += a[i * 3 + k] * inv[k * 3 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-12, "({i},{j}) = {acc}");
            }
        }
    }

    #[test]
    fn non_positive_definite_rejected() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(cholesky(&a, 2).is_none());
    }
}
