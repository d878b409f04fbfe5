//! Plane-induced pixel warps between two calibrated views.
//!
//! Planes are parameterized as `nᵀx + d = 0` in reference-camera coordinates.
//! Rendered plane distances satisfy `N(p)ᵀx = 𝒟(p)` on the kernel plane, so
//! callers warping rendered geometry pass `n = N(p)` and `d = −𝒟(p)`.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::loss::LossError;
use crate::scene::{CameraIntrinsics, PixelCoord};

const MIN_PLANE_DIST: f64 = 1e-12;
const MIN_HOMOGENEOUS_W: f64 = 1e-12;

/// Homography `H = K_n (R − T nᵀ / d) K_r⁻¹` mapping reference pixels to
/// neighbor pixels for points on the plane `nᵀx + d = 0`.
pub fn plane_homography(
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    n_r: &Vector3<f64>,
    d_r: f64,
) -> Result<Matrix3<f64>, LossError> {
    if d_r.abs() < MIN_PLANE_DIST {
        return Err(LossError::ZeroPlaneDistance);
    }
    let (r, t) = rel;
    let mid = r - t * n_r.transpose() / d_r;
    Ok(k_nbr.matrix() * mid * k_ref.matrix_inverse())
}

/// Gradients of `sum(d_h ⊙ H)` with respect to the plane parameters.
pub fn plane_homography_backward(
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    n_r: &Vector3<f64>,
    d_r: f64,
    d_h: &Matrix3<f64>,
) -> (Vector3<f64>, f64) {
    let (_, t) = rel;
    let b = k_nbr.matrix() * t;
    let k_ref_inv = k_ref.matrix_inverse();
    // H = K_n R K_r⁻¹ − (1/d)·b·(nᵀ K_r⁻¹)
    let d_n = -(k_ref_inv * (d_h.transpose() * b)) / d_r;
    let d_d = b.dot(&(d_h * (k_ref_inv.transpose() * n_r))) / (d_r * d_r);
    (d_n, d_d)
}

/// Dehomogenized `H·p̃`.
pub fn warp_pixel(h: &Matrix3<f64>, p: PixelCoord) -> Result<PixelCoord, LossError> {
    let q = h * p.homogeneous();
    if q.z.abs() < MIN_HOMOGENEOUS_W {
        return Err(LossError::PointAtInfinity);
    }
    Ok(PixelCoord::new(q.x / q.z, q.y / q.z))
}

/// Gradients of the warped coordinates with respect to the homography entries
/// and the source pixel. `d_out` is the upstream (du', dv') pair.
pub fn warp_pixel_backward(
    h: &Matrix3<f64>,
    p: PixelCoord,
    d_out: Vector2<f64>,
) -> (Matrix3<f64>, Vector2<f64>) {
    let pt = p.homogeneous();
    let q = h * pt;
    let inv_w = 1.0 / q.z;
    let d_q = Vector3::new(
        d_out.x * inv_w,
        d_out.y * inv_w,
        -(d_out.x * q.x + d_out.y * q.y) * inv_w * inv_w,
    );
    let d_h = d_q * pt.transpose();
    let d_p_full = h.transpose() * d_q;
    (d_h, Vector2::new(d_p_full.x, d_p_full.y))
}

/// Re-expresses the plane `nᵀx + d = 0` in the neighbor frame reached by
/// `x_n = R x_r + T`.
pub fn transform_plane(
    rel: &(Matrix3<f64>, Vector3<f64>),
    n_r: &Vector3<f64>,
    d_r: f64,
) -> (Vector3<f64>, f64) {
    let (r, t) = rel;
    let n_n = r * n_r;
    (n_n, d_r - n_n.dot(t))
}

/// Inverse of a relative rigid transform.
pub fn invert_relative(rel: &(Matrix3<f64>, Vector3<f64>)) -> (Matrix3<f64>, Vector3<f64>) {
    let (r, t) = rel;
    (r.transpose(), -(r.transpose() * t))
}
