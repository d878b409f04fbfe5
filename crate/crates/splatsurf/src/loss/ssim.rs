//! Structural similarity over Gaussian-weighted local windows.
//!
//! Single implementation shared by the training loss and the evaluation
//! metric. Only fully interior windows contribute; images smaller than one
//! window produce a score of 0 and zero gradients.

use crate::scene::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn window_stats(
    a: &ImageBuffer,
    b: &ImageBuffer,
    taps: &[f64; SSIM_WINDOW],
    cx: usize,
    cy: usize,
    ch: usize,
) -> WindowStats {
    let half = SSIM_WINDOW / 2;
    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..SSIM_WINDOW {
        let y = cy + dy - half;
        for dx in 0..SSIM_WINDOW {
            let x = cx + dx - half;
            let w = taps[dy] * taps[dx];
            let xa = a.get(x, y, ch);
            let xb = b.get(x, y, ch);
            mx += w * xa;
            my += w * xb;
            mxx += w * xa * xa;
            myy += w * xb * xb;
            mxy += w * xa * xb;
        }
    }
    WindowStats {
        mu_x: mx,
        mu_y: my,
        sxx: mxx - mx * mx,
        syy: myy - my * my,
        sxy: mxy - mx * my,
    }
}

fn ssim_value(s: &WindowStats) -> f64 {
    let a1 = 2.0 * s.mu_x * s.mu_y + C1;
    let a2 = 2.0 * s.sxy + C2;
    let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + C1;
    let b2 = s.sxx + s.syy + C2;
    a1 * a2 / (b1 * b2)
}

fn window_count(a: &ImageBuffer) -> usize {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return 0;
    }
    (a.width - SSIM_WINDOW + 1) * (a.height - SSIM_WINDOW + 1) * a.channels
}

/// Mean SSIM over all interior windows and channels. Dimensions must match.
pub fn ssim_mean(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    assert_eq!((a.width, a.height, a.channels), (b.width, b.height, b.channels));
    let n = window_count(a);
    if n == 0 {
        return 0.0;
    }
    let taps = gaussian_taps();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    for cy in half..a.height - half {
        for cx in half..a.width - half {
            for ch in 0..a.channels {
                total += ssim_value(&window_stats(a, b, &taps, cx, cy, ch));
            }
        }
    }
    total / n as f64
}

/// Gradients of `d_mean * ssim_mean(a, b)` with respect to both images.
pub fn ssim_backward(a: &ImageBuffer, b: &ImageBuffer, d_mean: f64) -> (ImageBuffer, ImageBuffer) {
    assert_eq!((a.width, a.height, a.channels), (b.width, b.height, b.channels));
    let mut d_a = ImageBuffer::zeros(a.width, a.height, a.channels);
    let mut d_b = ImageBuffer::zeros(a.width, a.height, a.channels);
    let n = window_count(a);
    if n == 0 {
        return (d_a, d_b);
    }
    let taps = gaussian_taps();
    let half = SSIM_WINDOW / 2;
    let up = d_mean / n as f64;
    for cy in half..a.height - half {
        for cx in half..a.width - half {
            for ch in 0..a.channels {
                let s = window_stats(a, b, &taps, cx, cy, ch);
                let a1 = 2.0 * s.mu_x * s.mu_y + C1;
                let a2 = 2.0 * s.sxy + C2;
                let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + C1;
                let b2 = s.sxx + s.syy + C2;
                let v = a1 * a2 / (b1 * b2);
                let d_mu_x = up * (2.0 * s.mu_y * a2 / (b1 * b2) - 2.0 * s.mu_x * v / b1);
                let d_mu_y = up * (2.0 * s.mu_x * a2 / (b1 * b2) - 2.0 * s.mu_y * v / b1);
                let d_svar = up * (-v / b2);
                let d_sxy = up * (2.0 * a1 / (b1 * b2));
                for dy in 0..SSIM_WINDOW {
                    let y = cy + dy - half;
                    for dx in 0..SSIM_WINDOW {
                        let x = cx + dx - half;
                        let w = taps[dy] * taps[dx];
                        let xa = a.get(x, y, ch);
                        let xb = b.get(x, y, ch);
                        d_a.add(
                            x,
                            y,
                            ch,
                            w * (d_mu_x
                                + 2.0 * (xa - s.mu_x) * d_svar
                                + (xb - s.mu_y) * d_sxy),
                        );
                        d_b.add(
                            x,
                            y,
                            ch,
                            w * (d_mu_y
                                + 2.0 * (xb - s.mu_y) * d_svar
                                + (xa - s.mu_x) * d_sxy),
                        );
                    }
                }
            }
        }
    }
    (d_a, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize, ch: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * ch).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageBuffer::from_data(w, h, ch, data).unwrap()
    }

    #[test]
    fn identical_images_score_one() {
        let img = random_image(3, 20, 16, 3);
        assert_relative_eq!(ssim_mean(&img, &img), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = random_image(5, 18, 18, 3);
        let b = random_image(6, 18, 18, 3);
        assert_relative_eq!(ssim_mean(&a, &b), ssim_mean(&b, &a), epsilon = 1e-12);
    }

    #[test]
    fn bounded_above_by_one() {
        let a = random_image(7, 16, 16, 1);
        let b = random_image(8, 16, 16, 1);
        let v = ssim_mean(&a, &b);
        assert!(v < 1.0 && v > -1.0);
    }

    #[test]
    fn tiny_image_scores_zero() {
        let a = random_image(9, 8, 8, 3);
        assert_eq!(ssim_mean(&a, &a), 0.0);
        let (da, db) = ssim_backward(&a, &a, 1.0);
        assert!(da.data.iter().all(|&v| v == 0.0));
        assert!(db.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let taps = gaussian_taps();
        let sum: f64 = taps.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-14);
        for i in 0..SSIM_WINDOW / 2 {
            assert_relative_eq!(taps[i], taps[SSIM_WINDOW - 1 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut a = random_image(11, 14, 13, 3);
        let mut b = random_image(12, 14, 13, 3);
        let d_mean = 0.7;
        let (da, db) = ssim_backward(&a, &b, d_mean);
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..40 {
            let i = rng.gen_range(0..a.data.len());
            let orig = a.data[i];
            a.data[i] = orig + eps;
            let lp = d_mean * ssim_mean(&a, &b);
            a.data[i] = orig - eps;
            let lm = d_mean * ssim_mean(&a, &b);
            a.data[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert_relative_eq!(da.data[i], fd, epsilon = 1e-7, max_relative = 1e-5);

            let j = rng.gen_range(0..b.data.len());
            let orig = b.data[j];
            b.data[j] = orig + eps;
            let lp = d_mean * ssim_mean(&a, &b);
            b.data[j] = orig - eps;
            let lm = d_mean * ssim_mean(&a, &b);
            b.data[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert_relative_eq!(db.data[j], fd, epsilon = 1e-7, max_relative = 1e-5);
        }
    }
}
