//! Scale-flattening loss: mean over kernels of the smallest axis scale.

use nalgebra::Vector3;

use crate::field::{FieldError, GaussianKernel};

/// Mean of the minimal activated scale over the kernel set, with the
/// subgradient routed to the minimal axis (ties: lowest axis index).
/// Gradients are with respect to the stored log-scales.
pub fn flatten_loss(
    kernels: &[GaussianKernel],
) -> Result<(f64, Vec<Vector3<f64>>), FieldError> {
    if kernels.is_empty() {
        return Err(FieldError::EmptyPointCloud);
    }
    let inv_n = 1.0 / kernels.len() as f64;
    let mut grads = Vec::with_capacity(kernels.len());
    let mut loss = 0.0;
    for k in kernels {
        let s = k.scale();
        let axis = k.min_scale_axis();
        loss += s[axis].abs() * inv_n;
        let mut g = Vector3::zeros();
        // d|s|/d(log s) = s for s > 0 (exp never reaches 0).
        g[axis] = s[axis] * inv_n;
        grads.push(g);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    fn kern(scales: [f64; 3]) -> GaussianKernel {
        GaussianKernel {
            mu: Vector3::zeros(),
            rot: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::new(scales[0].ln(), scales[1].ln(), scales[2].ln()),
            opacity_logit: 0.0,
            color_logit: Vector3::zeros(),
        }
    }

    #[test]
    fn single_kernel_min_axis() {
        let (l, g) = flatten_loss(&[kern([0.5, 0.2, 0.1])]).unwrap();
        assert_relative_eq!(l, 0.1, epsilon = 1e-12);
        assert_relative_eq!(g[0][2], 0.1, epsilon = 1e-12);
        assert_eq!(g[0][0], 0.0);
        assert_eq!(g[0][1], 0.0);
    }

    #[test]
    fn mean_of_two() {
        let (l, _) = flatten_loss(&[kern([0.5, 0.2, 0.1]), kern([0.3, 0.4, 0.5])]).unwrap();
        assert_relative_eq!(l, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn near_zero_scales_floor_at_zero() {
        let (l, _) = flatten_loss(&[kern([1e-300, 1.0, 1.0])]).unwrap();
        assert!(l >= 0.0 && l < 1e-299);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(flatten_loss(&[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut ks = vec![kern([0.5, 0.2, 0.1]), kern([0.15, 0.4, 0.3])];
        let (_, grads) = flatten_loss(&ks).unwrap();
        let eps = 1e-6;
        for ki in 0..ks.len() {
            for a in 0..3 {
                let orig = ks[ki].log_scale[a];
                ks[ki].log_scale[a] = orig + eps;
                let (lp, _) = flatten_loss(&ks).unwrap();
                ks[ki].log_scale[a] = orig - eps;
                let (lm, _) = flatten_loss(&ks).unwrap();
                ks[ki].log_scale[a] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert_relative_eq!(grads[ki][a], fd, epsilon = 1e-8);
            }
        }
    }
}
