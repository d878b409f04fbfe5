//! Depth-normal consistency: the normal implied by backprojecting the 4-pixel
//! depth stencil should agree with the rendered normal.

use nalgebra::Vector3;

use crate::loss::LossError;
use crate::scene::{CameraIntrinsics, ImageBuffer, PixelCoord};

/// Per-pixel weight applied to the normal residual.
#[derive(Debug, Clone, Copy)]
pub enum LocalWeight {
    /// |(P_up − P_down)·(P_left − P_right)|, the literal stencil dot product.
    PlanarDot,
    /// exp(−|∇D|/tau) computed from central depth differences.
    DepthGradient { tau: f64 },
}

impl Default for LocalWeight {
    fn default() -> Self {
        LocalWeight::PlanarDot
    }
}

#[derive(Debug)]
pub struct LocalGeomResult {
    pub loss: f64,
    pub count: usize,
    pub d_depth: ImageBuffer,
    pub d_normal: ImageBuffer,
}

fn unit3_backward(raw: &Vector3<f64>, d_unit: &Vector3<f64>) -> Vector3<f64> {
    let n = raw.norm();
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

fn sign3(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x.signum(), v.y.signum(), v.z.signum())
}

/// Normal and weight implied by the depth stencil around `(x, y)`, or `None`
/// when the cross product degenerates.
pub fn stencil_normal(
    depth: &ImageBuffer,
    k: &CameraIntrinsics,
    x: usize,
    y: usize,
) -> Option<(Vector3<f64>, f64)> {
    let rays = stencil_rays(k, x, y);
    let ds = stencil_depths(depth, x, y);
    let p: Vec<Vector3<f64>> = rays.iter().zip(ds).map(|(r, d)| r * d).collect();
    let v1 = p[0] - p[1];
    let v2 = p[2] - p[3];
    let c = v1.cross(&v2);
    if c.norm() < 1e-12 {
        return None;
    }
    Some((c.normalize(), v1.dot(&v2).abs()))
}

fn stencil_rays(k: &CameraIntrinsics, x: usize, y: usize) -> [Vector3<f64>; 4] {
    let (xf, yf) = (x as f64, y as f64);
    [
        k.ray_dir(PixelCoord::new(xf, yf - 1.0)),
        k.ray_dir(PixelCoord::new(xf, yf + 1.0)),
        k.ray_dir(PixelCoord::new(xf - 1.0, yf)),
        k.ray_dir(PixelCoord::new(xf + 1.0, yf)),
    ]
}

fn stencil_depths(depth: &ImageBuffer, x: usize, y: usize) -> [f64; 4] {
    [
        depth.get(x, y - 1, 0),
        depth.get(x, y + 1, 0),
        depth.get(x - 1, y, 0),
        depth.get(x + 1, y, 0),
    ]
}

/// Mean weighted L1 gap between stencil-implied and rendered normals over
/// interior pixels whose full stencil is valid. Gradients (scaled by
/// `d_loss`) flow into the depth and normal buffers.
pub fn local_geom_loss(
    depth: &ImageBuffer,
    valid: &[bool],
    normal: &ImageBuffer,
    k: &CameraIntrinsics,
    weight: &LocalWeight,
    d_loss: f64,
) -> Result<LocalGeomResult, LossError> {
    let (w, h) = (depth.width, depth.height);
    if depth.channels != 1 || normal.channels != 3 || normal.width != w || normal.height != h {
        return Err(LossError::DimensionMismatch(format!(
            "depth {}x{}x{} vs normal {}x{}x{}",
            w, h, depth.channels, normal.width, normal.height, normal.channels
        )));
    }
    if valid.len() != w * h {
        return Err(LossError::DimensionMismatch(format!(
            "mask has {} entries for {}x{} image",
            valid.len(),
            w,
            h
        )));
    }
    let mut d_depth = ImageBuffer::zeros(w, h, 1);
    let mut d_normal = ImageBuffer::zeros(w, h, 3);
    let mut sum = 0.0;
    let mut count = 0usize;
    if w < 3 || h < 3 {
        return Ok(LocalGeomResult { loss: 0.0, count, d_depth, d_normal });
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let ok = valid[y * w + x]
                && valid[(y - 1) * w + x]
                && valid[(y + 1) * w + x]
                && valid[y * w + x - 1]
                && valid[y * w + x + 1];
            if !ok {
                continue;
            }
            let rays = stencil_rays(k, x, y);
            let ds = stencil_depths(depth, x, y);
            let p0 = rays[0] * ds[0];
            let p1 = rays[1] * ds[1];
            let p2 = rays[2] * ds[2];
            let p3 = rays[3] * ds[3];
            let v1 = p0 - p1;
            let v2 = p2 - p3;
            let c = v1.cross(&v2);
            if c.norm() < 1e-12 {
                continue;
            }
            let m_raw = normal.pixel3(x, y);
            if m_raw.norm() < 1e-12 {
                continue;
            }
            let n_hat = c.normalize();
            let m = m_raw.normalize();
            let diff = n_hat - m;
            let resid = diff.abs().sum();
            let (omega, grad_mag) = match weight {
                LocalWeight::PlanarDot => (v1.dot(&v2).abs(), 0.0),
                LocalWeight::DepthGradient { tau } => {
                    let gx = (ds[3] - ds[2]) / 2.0;
                    let gy = (ds[1] - ds[0]) / 2.0;
                    let g = (gx * gx + gy * gy).sqrt();
                    ((-g / tau).exp(), g)
                }
            };
            sum += resid * omega;
            count += 1;

            // Unscaled backward; buffers are rescaled by d_loss/count at the end.
            let d_resid = omega;
            let d_omega = resid;
            let d_diff = sign3(&diff) * d_resid;
            let d_mraw = unit3_backward(&m_raw, &(-d_diff));
            d_normal.add(x, y, 0, d_mraw.x);
            d_normal.add(x, y, 1, d_mraw.y);
            d_normal.add(x, y, 2, d_mraw.z);
            let d_c = unit3_backward(&c, &d_diff);
            let mut d_v1 = v2.cross(&d_c);
            let mut d_v2 = d_c.cross(&v1);
            let mut d_ds = [0.0; 4];
            match weight {
                LocalWeight::PlanarDot => {
                    let s = v1.dot(&v2).signum();
                    d_v1 += v2 * (s * d_omega);
                    d_v2 += v1 * (s * d_omega);
                }
                LocalWeight::DepthGradient { tau } => {
                    if grad_mag > 1e-12 {
                        let gx = (ds[3] - ds[2]) / 2.0;
                        let gy = (ds[1] - ds[0]) / 2.0;
                        let d_g = -omega / tau * d_omega;
                        let d_gx = d_g * gx / grad_mag;
                        let d_gy = d_g * gy / grad_mag;
                        d_ds[3] += d_gx / 2.0;
                        d_ds[2] -= d_gx / 2.0;
                        d_ds[1] += d_gy / 2.0;
                        d_ds[0] -= d_gy / 2.0;
                    }
                }
            }
            d_ds[0] += rays[0].dot(&d_v1);
            d_ds[1] -= rays[1].dot(&d_v1);
            d_ds[2] += rays[2].dot(&d_v2);
            d_ds[3] -= rays[3].dot(&d_v2);
            d_depth.add(x, y - 1, 0, d_ds[0]);
            d_depth.add(x, y + 1, 0, d_ds[1]);
            d_depth.add(x - 1, y, 0, d_ds[2]);
            d_depth.add(x + 1, y, 0, d_ds[3]);
        }
    }
    if count == 0 {
        return Ok(LocalGeomResult { loss: 0.0, count, d_depth, d_normal });
    }
    let scale = d_loss / count as f64;
    for v in d_depth.data.iter_mut() {
        *v *= scale;
    }
    for v in d_normal.data.iter_mut() {
        *v *= scale;
    }
    Ok(LocalGeomResult { loss: sum / count as f64, count, d_depth, d_normal })
}
