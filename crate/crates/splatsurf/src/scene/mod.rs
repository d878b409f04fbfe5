//! Camera geometry, image containers and the coordinate conventions shared by
//! every other module.
//!
//! Conventions, fixed once here:
//! - Poses store the camera-to-world transform `(R_c, T_c)`; the world-to-camera
//!   direction is always derived, never stored.
//! - The camera frame is x-right, y-down, z-forward (points in front have z > 0).
//! - Pixel `(0, 0)` is the *center* of the top-left pixel.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive camera depth z = {z}")]
    NonPositiveDepth { z: f64 },
    #[error("image buffer size {len} does not match {width}x{height}x{channels}")]
    BufferSizeMismatch {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        debug_assert!(cx > 0.0 && cx < width as f64);
        debug_assert!(cy > 0.0 && cy < height as f64);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Ray direction `K⁻¹·p̃ = ((u−cx)/fx, (v−cy)/fy, 1)` for a pixel.
    pub fn ray_dir(&self, p: PixelCoord) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// True when the continuous pixel coordinate falls inside the image
    /// rectangle spanned by the pixel centers' bounding box plus half a pixel
    /// on each side, i.e. `[-0.5, width-0.5) × [-0.5, height-0.5)`.
    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u >= -0.5 && p.u < self.width as f64 - 0.5 && p.v >= -0.5 && p.v < self.height as f64 - 0.5
    }

    /// Calibration matrix `[[fx,0,cx],[0,fy,cy],[0,0,1]]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of the calibration matrix.
    pub fn matrix_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics for dividing the image side lengths by an integer factor.
    /// Pixel centers map as `u' = (u + 0.5)/n − 0.5`.
    pub fn downscaled(&self, n: usize) -> Self {
        let n_f = n as f64;
        Self {
            fx: self.fx / n_f,
            fy: self.fy / n_f,
            cx: (self.cx + 0.5) / n_f - 0.5,
            cy: (self.cy + 0.5) / n_f - 0.5,
            width: self.width / n,
            height: self.height / n,
        }
    }
}

/// Camera pose as camera-to-world rotation `R_c` and camera center `T_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(is_rotation(&rotation, 1e-9), "pose rotation not orthonormal");
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates (alias for the stored translation).
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World point into camera coordinates: `Rᵀ·(x − T)`.
    pub fn world_to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_world - self.translation)
    }

    /// Camera point into world coordinates: `R·x + T`.
    pub fn camera_to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_cam + self.translation
    }
}

/// Check `RᵀR = I` and `det R = +1` within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let rtr = r.transpose() * r;
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((rtr[(i, j)] - expect).abs());
        }
    }
    max_dev <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Continuous pixel coordinate; the homogeneous lift is `(u, v, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

/// Row-major scalar image with 1 or 3 channels.
///
/// Color data lives in `[0, 1]`; depth and plane-distance buffers are
/// unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, GeomError> {
        if data.len() != width * height * channels {
            return Err(GeomError::BufferSizeMismatch {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] += v;
    }

    pub fn pixel3(&self, x: usize, y: usize) -> Vector3<f64> {
        debug_assert_eq!(self.channels, 3);
        Vector3::new(self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2))
    }

    /// Luma conversion `0.299 R + 0.587 G + 0.114 B`; identity on 1-channel
    /// buffers.
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageBuffer::zeros(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = 0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1)
                    + 0.114 * self.get(x, y, 2);
                out.set(x, y, 0, v);
            }
        }
        out
    }

    /// Bilinear sample at a continuous pixel coordinate, clamped to the image
    /// border. Single-channel only.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let cl = |x: f64, hi: usize| -> usize { (x.max(0.0) as usize).min(hi - 1) };
        let x0i = cl(x0, self.width);
        let x1i = cl(x0 + 1.0, self.width);
        let y0i = cl(y0, self.height);
        let y1i = cl(y0 + 1.0, self.height);
        let v00 = self.get(x0i, y0i, 0);
        let v10 = self.get(x1i, y0i, 0);
        let v01 = self.get(x0i, y1i, 0);
        let v11 = self.get(x1i, y1i, 0);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    /// Bilinear sample plus its partial derivatives with respect to the
    /// sample coordinates. Outside the border the value is clamped, so the
    /// derivative in the outward direction is zero.
    pub fn sample_bilinear_grad(&self, u: f64, v: f64) -> (f64, f64, f64) {
        debug_assert_eq!(self.channels, 1);
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let cl = |x: f64, hi: usize| -> usize { (x.max(0.0) as usize).min(hi - 1) };
        let x0i = cl(x0, self.width);
        let x1i = cl(x0 + 1.0, self.width);
        let y0i = cl(y0, self.height);
        let y1i = cl(y0 + 1.0, self.height);
        let v00 = self.get(x0i, y0i, 0);
        let v10 = self.get(x1i, y0i, 0);
        let v01 = self.get(x0i, y1i, 0);
        let v11 = self.get(x1i, y1i, 0);
        let val = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
        let in_x = u >= 0.0 && u <= (self.width - 1) as f64;
        let in_y = v >= 0.0 && v <= (self.height - 1) as f64;
        let du = if in_x {
            (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
        } else {
            0.0
        };
        let dv = if in_y {
            (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
        } else {
            0.0
        };
        (val, du, dv)
    }

    /// Box downscale by an integer factor (mean over each n×n block).
    pub fn downscale_box(&self, n: usize) -> ImageBuffer {
        assert!(n >= 1);
        if n == 1 {
            return self.clone();
        }
        let w = self.width / n;
        let h = self.height / n;
        let mut out = ImageBuffer::zeros(w, h, self.channels);
        let inv = 1.0 / (n * n) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for dy in 0..n {
                        for dx in 0..n {
                            acc += self.get(x * n + dx, y * n + dy, c);
                        }
                    }
                    out.set(x, y, c, acc * inv);
                }
            }
        }
        out
    }
}

/// A posed, calibrated training image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: u32,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub image: ImageBuffer,
    /// Index into the appearance embedding table.
    pub embedding_id: usize,
}

impl View {
    pub fn new(
        id: u32,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        image: ImageBuffer,
        embedding_id: usize,
    ) -> Result<Self, GeomError> {
        if image.width != intrinsics.width || image.height != intrinsics.height {
            return Err(GeomError::BufferSizeMismatch {
                len: image.data.len(),
                width: intrinsics.width,
                height: intrinsics.height,
                channels: image.channels,
            });
        }
        Ok(Self {
            id,
            intrinsics,
            pose,
            image,
            embedding_id,
        })
    }
}

const MIN_DEPTH: f64 = 1e-9;

/// Project a world point through a pinhole camera.
///
/// Returns the continuous pixel coordinate and the camera-space depth z.
pub fn project_point(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    x_world: &Vector3<f64>,
) -> Result<(PixelCoord, f64), GeomError> {
    let x_cam = pose.world_to_camera(x_world);
    let z = x_cam.z;
    if z <= MIN_DEPTH {
        return Err(GeomError::NonPositiveDepth { z });
    }
    let u = k.fx * x_cam.x / z + k.cx;
    let v = k.fy * x_cam.y / z + k.cy;
    Ok((PixelCoord::new(u, v), z))
}

/// Lift a pixel back to camera coordinates at the given depth:
/// `depth · K⁻¹·p̃`.
pub fn backproject(
    k: &CameraIntrinsics,
    p: PixelCoord,
    depth: f64,
) -> Result<Vector3<f64>, GeomError> {
    if depth <= 0.0 {
        return Err(GeomError::NonPositiveDepth { z: depth });
    }
    Ok(k.ray_dir(p) * depth)
}

/// Relative transform between two camera frames: for any world point,
/// `x_nbr = R_rn · x_ref + T_rn`.
pub fn relative_transform(ref_pose: &CameraPose, nbr_pose: &CameraPose) -> (Matrix3<f64>, Vector3<f64>) {
    let r = nbr_pose.rotation.transpose() * ref_pose.rotation;
    let t = nbr_pose.rotation.transpose() * (ref_pose.translation - nbr_pose.translation);
    (r, t)
}
