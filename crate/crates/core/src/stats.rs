//! Small statistics helpers shared by evaluation and the gradient harness.

use alloc::vec::Vec;

// Needed for the no_std build; redundant when std is linked for tests.
#[allow(unused_imports)]
use num_traits::Float;

/// Sample mean and the 95% confidence half-width (1.96 * stderr, ddof = 1).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let stderr = (var / n as f64).sqrt();
    (mean, 1.96 * stderr)
}

/// Coefficient of determination of the least-squares line through (x, y).
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    1.0 - ss_res / syy
}

/// Relative L2 distance ||a - b|| / ||b||.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Mean squared difference between two equal-length vectors.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Root mean squared difference.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    mse(a, b).sqrt()
}

/// Elementwise mean of a set of equal-length vectors (two-pass: sum in input
/// order, then divide), so aggregation is order-stable.
pub fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    debug_assert!(!vs.is_empty());
    let mut acc = alloc::vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ci_is_zero_for_constant_data() {
        let (mean, ci) = mean_ci95(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(mean, 1.0);
        assert_eq!(ci, 0.0);
    }

    #[test]
    fn r2_of_exact_line_is_one() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        assert!((linear_r2(&xs, &ys) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_l2_of_equal_vectors_is_zero() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn mean_vectors_averages() {
        let m = mean_vectors(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m, vec![2.0, 3.0]);
    }
}
