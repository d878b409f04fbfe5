//! Image quality metrics shared by evaluation and the CLI.

use crate::loss::ssim::ssim_mean;
use crate::loss::LossError;
use crate::scene::ImageBuffer;

/// MSE below this reports the 99 dB cap.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), LossError> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(LossError::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images on the [0, 1] range.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, LossError> {
    check_dims(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity, same kernel and constants as the photometric
/// loss term.
pub fn ssim_metric(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, LossError> {
    check_dims(a, b)?;
    Ok(ssim_mean(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuffer::zeros(24, 18, 3);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.2..0.8);
        }
        img
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let img = noisy(1);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn constant_offset_is_twenty_db() {
        let a = ImageBuffer::zeros(16, 16, 3);
        let mut b = ImageBuffer::zeros(16, 16, 3);
        for v in b.data.iter_mut() {
            *v = 0.1;
        }
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_noise_matches_expectation() {
        // Uniform noise in [-e, e] has mean square e^2/3.
        let e = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = noisy(2);
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v += rng.gen_range(-e..e);
        }
        let expect = 10.0 * (3.0 / (e * e)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 0.5);
    }

    #[test]
    fn ssim_metric_matches_loss_kernel() {
        let a = noisy(3);
        let b = noisy(4);
        assert_relative_eq!(
            ssim_metric(&a, &b).unwrap(),
            crate::loss::ssim::ssim_mean(&a, &b),
            epsilon = 1e-15
        );
        assert_relative_eq!(ssim_metric(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            ssim_metric(&a, &b).unwrap(),
            ssim_metric(&b, &a).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = ImageBuffer::zeros(8, 8, 3);
        let b = ImageBuffer::zeros(8, 9, 3);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim_metric(&a, &b).is_err());
    }
}
