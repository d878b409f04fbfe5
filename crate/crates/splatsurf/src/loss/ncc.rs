//! Normalized cross-correlation between flat sample vectors.

const NCC_EPS: f64 = 1e-8;

/// Correlation of two equal-length sample vectors after mean removal,
/// stabilized so constant patches correlate to 0 instead of dividing by zero.
/// Result lies in [-1, 1].
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&xa, &xb) in a.iter().zip(b) {
        let ca = xa - mean_a;
        let cb = xb - mean_b;
        sab += ca * cb;
        saa += ca * ca;
        sbb += cb * cb;
    }
    sab / ((saa + NCC_EPS) * (sbb + NCC_EPS)).sqrt()
}

/// Gradient of `d_ncc * ncc(a, b)` with respect to the second vector.
pub fn ncc_backward_b(a: &[f64], b: &[f64], d_ncc: f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&xa, &xb) in a.iter().zip(b) {
        let ca = xa - mean_a;
        let cb = xb - mean_b;
        sab += ca * cb;
        saa += ca * ca;
        sbb += cb * cb;
    }
    let denom = ((saa + NCC_EPS) * (sbb + NCC_EPS)).sqrt();
    let value = sab / denom;
    a.iter()
        .zip(b)
        .map(|(&xa, &xb)| {
            let ca = xa - mean_a;
            let cb = xb - mean_b;
            d_ncc * (ca / denom - value * cb / (sbb + NCC_EPS))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn self_correlation_is_one() {
        let a = random_vec(1, 49);
        assert_relative_eq!(ncc(&a, &a), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn affine_invariance() {
        let a = random_vec(2, 49);
        let b: Vec<f64> = a.iter().map(|&v| 2.0 * v + 0.3).collect();
        assert_relative_eq!(ncc(&a, &b), 1.0, epsilon = 1e-6);
        let c: Vec<f64> = a.iter().map(|&v| -1.5 * v + 0.1).collect();
        assert_relative_eq!(ncc(&a, &c), -1.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_patch_correlates_to_zero() {
        let a = vec![0.5; 49];
        let b = random_vec(3, 49);
        assert_eq!(ncc(&a, &b), 0.0);
        assert_eq!(ncc(&b, &a), 0.0);
        assert_eq!(ncc(&a, &a), 0.0);
    }

    #[test]
    fn bounded_magnitude() {
        for seed in 0..20 {
            let a = random_vec(seed, 25);
            let b = random_vec(seed + 100, 25);
            let v = ncc(&a, &b);
            assert!(v.abs() <= 1.0, "|ncc| = {} out of range", v.abs());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let a = random_vec(4, 30);
        let mut b = random_vec(5, 30);
        let d_ncc = 1.3;
        let grad = ncc_backward_b(&a, &b, d_ncc);
        let eps = 1e-6;
        for j in 0..b.len() {
            let orig = b[j];
            b[j] = orig + eps;
            let lp = d_ncc * ncc(&a, &b);
            b[j] = orig - eps;
            let lm = d_ncc * ncc(&a, &b);
            b[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert_relative_eq!(grad[j], fd, epsilon = 1e-8, max_relative = 1e-5);
        }
    }
}
