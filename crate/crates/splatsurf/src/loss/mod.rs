//! Training losses: photometric with appearance correction, scale flattening,
//! depth-normal consistency, and multi-view patch warping terms.

pub mod appearance;
pub mod flatten;
pub mod homography;
pub mod local;
pub mod multiview;
pub mod ncc;
pub mod ssim;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("plane distance is zero; homography undefined")]
    ZeroPlaneDistance,
    #[error("warped point maps to infinity")]
    PointAtInfinity,
    #[error("buffer dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("no appearance embedding for view {0}")]
    UnknownView(usize),
}

/// Relative weights of the loss components and the multi-view ramp-in point.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// DSSIM share inside the appearance term.
    pub lambda: f64,
    pub w_flatten: f64,
    pub w_local: f64,
    pub w_mv: f64,
    /// Multi-view terms contribute only from this iteration on.
    pub mv_start_iter: u64,
    /// Apply the DSSIM term to the appearance-adjusted image instead of the
    /// raw render.
    pub dssim_on_adjusted: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.25,
            w_flatten: 1.0,
            w_local: 1.0,
            w_mv: 1.0,
            mv_start_iter: 0,
            dssim_on_adjusted: false,
        }
    }
}

/// Patch geometry for multi-view NCC sampling.
#[derive(Debug, Clone, Copy)]
pub struct PatchConfig {
    /// Patch covers (2*half_size+1)^2 pixels.
    pub half_size: usize,
    /// Grid step between sampled patch centers.
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { half_size: 3, stride: 2 }
    }
}

/// Forward/backward reprojection gate for the multi-view terms.
#[derive(Debug, Clone, Copy)]
pub struct OcclusionConfig {
    /// Round-trip reprojection error above this many pixels marks occlusion.
    pub pixel_threshold: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { pixel_threshold: 1.0 }
    }
}

/// Scalar loss components, pre-weighting.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub appearance: f64,
    pub flatten: f64,
    pub local: f64,
    pub ncc: f64,
    pub geo: f64,
}

impl LossComponents {
    /// Weighted combination; multi-view terms are gated by iteration.
    pub fn total(&self, weights: &LossWeights, iter: u64) -> f64 {
        let mv = if iter >= weights.mv_start_iter {
            weights.w_mv * (self.ncc + self.geo)
        } else {
            0.0
        };
        weights.w_flatten * self.flatten + self.appearance + weights.w_local * self.local + mv
    }

    /// Whether the multi-view terms are active at this iteration.
    pub fn mv_active(weights: &LossWeights, iter: u64) -> bool {
        weights.w_mv != 0.0 && iter >= weights.mv_start_iter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_components_total_zero() {
        let c = LossComponents::default();
        assert_eq!(c.total(&LossWeights::default(), 10), 0.0);
    }

    #[test]
    fn appearance_only_when_other_weights_vanish() {
        let c = LossComponents { appearance: 0.7, flatten: 1.0, local: 1.0, ncc: 1.0, geo: 1.0 };
        let w = LossWeights {
            w_flatten: 0.0,
            w_local: 0.0,
            w_mv: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(c.total(&w, 5), 0.7);
    }

    #[test]
    fn multiview_terms_gated_by_iteration() {
        let c = LossComponents { ncc: 0.5, geo: 0.25, ..Default::default() };
        let w = LossWeights { w_mv: 2.0, mv_start_iter: 100, ..LossWeights::default() };
        assert_eq!(c.total(&w, 99), 0.0);
        assert_eq!(c.total(&w, 100), 1.5);
        assert!(!LossComponents::mv_active(&w, 99));
        assert!(LossComponents::mv_active(&w, 100));
    }

    #[test]
    fn total_is_linear_in_components() {
        let c1 = LossComponents { appearance: 0.1, flatten: 0.2, local: 0.3, ncc: 0.4, geo: 0.5 };
        let c2 = LossComponents { appearance: 0.7, flatten: 0.1, local: 0.9, ncc: 0.2, geo: 0.6 };
        let sum = LossComponents {
            appearance: c1.appearance + c2.appearance,
            flatten: c1.flatten + c2.flatten,
            local: c1.local + c2.local,
            ncc: c1.ncc + c2.ncc,
            geo: c1.geo + c2.geo,
        };
        let w = LossWeights::default();
        let lhs = sum.total(&w, 3);
        let rhs = c1.total(&w, 3) + c2.total(&w, 3);
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
