//! Hand-written reverse pass of the forward compositing.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{accumulate_pixel, perspective_jacobian, PreparedScene, RenderOptions, SplatTape};
use crate::field::decoder::KernelGrad;
use crate::field::{normalize_backward, quat_to_matrix_backward, GaussianKernel};
use crate::param::dsigmoid;
use crate::scene::{ImageBuffer, View};

/// Upstream loss gradients with respect to the rendered buffers.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub color: ImageBuffer,
    pub normal: ImageBuffer,
    pub plane_dist: ImageBuffer,
    pub alpha: ImageBuffer,
}

impl Upstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: ImageBuffer::zeros(width, height, 3),
            normal: ImageBuffer::zeros(width, height, 3),
            plane_dist: ImageBuffer::zeros(width, height, 1),
            alpha: ImageBuffer::zeros(width, height, 1),
        }
    }
}

#[derive(Clone, Copy)]
struct SplatAccum {
    d_mean2d: Vector2<f64>,
    d_lambda: Matrix2<f64>,
    d_color: Vector3<f64>,
    d_ncam: Vector3<f64>,
    d_di: f64,
    d_op: f64,
}

impl SplatAccum {
    fn zeros() -> Self {
        Self {
            d_mean2d: Vector2::zeros(),
            d_lambda: Matrix2::zeros(),
            d_color: Vector3::zeros(),
            d_ncam: Vector3::zeros(),
            d_di: 0.0,
            d_op: 0.0,
        }
    }

    fn add(&mut self, o: &SplatAccum) {
        self.d_mean2d += o.d_mean2d;
        self.d_lambda += o.d_lambda;
        self.d_color += o.d_color;
        self.d_ncam += o.d_ncam;
        self.d_di += o.d_di;
        self.d_op += o.d_op;
    }

    fn is_zero(&self) -> bool {
        self.d_di == 0.0
            && self.d_op == 0.0
            && self.d_mean2d == Vector2::zeros()
            && self.d_color == Vector3::zeros()
            && self.d_ncam == Vector3::zeros()
            && self.d_lambda == Matrix2::zeros()
    }
}

struct Contribution {
    si: u32,
    alpha: f64,
    g: f64,
    clamped: bool,
    t_before: f64,
}

/// Exact gradients of the forward blending with respect to every kernel's
/// stored parameters.
///
/// `upstream` gradients on the depth buffer must be folded into
/// `plane_dist`/`normal` first via [`super::depth_backward`]. Rows are
/// processed in parallel but merged in row order, so results are bit-stable
/// for any worker count.
pub fn render_backward(
    prep: &PreparedScene,
    kernels: &[GaussianKernel],
    view: &View,
    background: &Vector3<f64>,
    opts: &RenderOptions,
    upstream: &Upstream,
) -> Vec<KernelGrad> {
    let (w, h) = (prep.width, prep.height);
    let n_splats = prep.tapes.len();

    struct RowGrads {
        touched: Vec<u32>,
        accums: Vec<SplatAccum>,
    }

    let rows: Vec<RowGrads> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut accums = vec![SplatAccum::zeros(); n_splats];
            let mut touched_mask = vec![false; n_splats];
            let mut touched = Vec::new();
            let mut scratch: Vec<Contribution> = Vec::new();
            let bucket = &prep.row_buckets[y];
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let u_c = Vector3::new(
                    upstream.color.get(x, y, 0),
                    upstream.color.get(x, y, 1),
                    upstream.color.get(x, y, 2),
                );
                let u_n = Vector3::new(
                    upstream.normal.get(x, y, 0),
                    upstream.normal.get(x, y, 1),
                    upstream.normal.get(x, y, 2),
                );
                let u_pd = upstream.plane_dist.get(x, y, 0);
                let u_a = upstream.alpha.get(x, y, 0);
                if u_c == Vector3::zeros() && u_n == Vector3::zeros() && u_pd == 0.0 && u_a == 0.0 {
                    continue;
                }

                scratch.clear();
                let t_final = accumulate_pixel(
                    &prep.tapes,
                    bucket,
                    px,
                    py,
                    opts,
                    |si, _tape, alpha, g, clamped, t| {
                        scratch.push(Contribution {
                            si,
                            alpha,
                            g,
                            clamped,
                            t_before: t,
                        });
                    },
                );

                // Weighted upstream per contribution and the suffix trick for
                // the transmittance chain.
                let rho = |c: &Contribution| -> f64 {
                    let tape = &prep.tapes[c.si as usize];
                    u_c.dot(&tape.color) + u_n.dot(&tape.splat.cam_normal)
                        + u_pd * tape.splat.plane_dist
                };
                let bg_term = u_c.dot(background) - u_a;
                let total: f64 = scratch.iter().map(|c| rho(c) * c.alpha * c.t_before).sum();
                let mut prefix = 0.0;
                for c in &scratch {
                    let tape = &prep.tapes[c.si as usize];
                    let r = rho(c);
                    let w_at = c.alpha * c.t_before;
                    prefix += r * w_at;
                    let suffix = total - prefix;
                    let d_alpha =
                        r * c.t_before - (suffix + bg_term * t_final) / (1.0 - c.alpha);

                    let acc = &mut accums[c.si as usize];
                    if !touched_mask[c.si as usize] {
                        touched_mask[c.si as usize] = true;
                        touched.push(c.si);
                    }
                    acc.d_color += u_c * w_at;
                    acc.d_ncam += u_n * w_at;
                    acc.d_di += u_pd * w_at;
                    if !c.clamped {
                        acc.d_op += c.g * d_alpha;
                        let d_q = -0.5 * tape.opacity * c.g * d_alpha;
                        let delta =
                            Vector2::new(px - tape.splat.mean2d.u, py - tape.splat.mean2d.v);
                        let li_delta = tape.cov_inv * delta;
                        acc.d_mean2d -= d_q * 2.0 * li_delta;
                        acc.d_lambda += d_q * delta * delta.transpose();
                    }
                }
            }
            RowGrads { touched, accums }
        })
        .collect();

    // Deterministic merge in row order.
    let mut accums = vec![SplatAccum::zeros(); n_splats];
    for row in &rows {
        for &si in &row.touched {
            accums[si as usize].add(&row.accums[si as usize]);
        }
    }

    let mut out = vec![KernelGrad::zeros(); kernels.len()];
    for (si, acc) in accums.iter().enumerate() {
        if acc.is_zero() {
            continue;
        }
        let tape = &prep.tapes[si];
        let kern = &kernels[tape.splat.kernel_index as usize];
        let g = chain_geometry(tape, kern, view, acc);
        out[tape.splat.kernel_index as usize].add(&g);
    }
    out
}

/// Pull screen-space and blending gradients back to one kernel's stored
/// parameters through the projection geometry.
fn chain_geometry(
    tape: &SplatTape,
    kern: &GaussianKernel,
    view: &View,
    acc: &SplatAccum,
) -> KernelGrad {
    let k = &view.intrinsics;
    let w_mat = view.pose.rotation.transpose();
    let mu_cam = tape.mu_cam;
    let z = mu_cam.z;

    // Projection of the mean.
    let mut d_mu_cam = Vector3::new(
        acc.d_mean2d.x * k.fx / z,
        acc.d_mean2d.y * k.fy / z,
        -acc.d_mean2d.x * k.fx * mu_cam.x / (z * z) - acc.d_mean2d.y * k.fy * mu_cam.y / (z * z),
    );

    // Λ = cov2d⁻¹ chain.
    let li = tape.cov_inv;
    let d_lambda_sym = 0.5 * (acc.d_lambda + acc.d_lambda.transpose());
    let d_cov2d = -li * d_lambda_sym * li;

    // cov2d = M Σ₃ Mᵀ + dilation, M = J W.
    let s = tape.scale;
    let diag_s2 = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    let sigma3 = tape.rot * diag_s2 * tape.rot.transpose();
    let j = perspective_jacobian(k, &mu_cam);
    let m = j * w_mat;
    let d_sigma3 = m.transpose() * d_cov2d * m;
    let d_m = 2.0 * d_cov2d * m * sigma3;
    let d_j = d_m * w_mat.transpose();

    // Perspective Jacobian entries.
    let (fx, fy) = (k.fx, k.fy);
    d_mu_cam.x += d_j[(0, 2)] * (-fx / (z * z));
    d_mu_cam.y += d_j[(1, 2)] * (-fy / (z * z));
    d_mu_cam.z += d_j[(0, 0)] * (-fx / (z * z))
        + d_j[(1, 1)] * (-fy / (z * z))
        + d_j[(0, 2)] * (2.0 * fx * mu_cam.x / (z * z * z))
        + d_j[(1, 2)] * (2.0 * fy * mu_cam.y / (z * z * z));

    // Plane distance d_i = μ_cam · n_cam.
    d_mu_cam += tape.splat.cam_normal * acc.d_di;
    let d_ncam = acc.d_ncam + mu_cam * acc.d_di;

    // n_cam = W n_world; n_world = sign · R[:, axis].
    let d_nworld = w_mat.transpose() * d_ncam;

    // Σ₃ = R diag(s²) Rᵀ.
    let mut d_rot = 2.0 * d_sigma3 * tape.rot * diag_s2;
    for r in 0..3 {
        d_rot[(r, tape.axis)] += tape.normal_sign * d_nworld[r];
    }
    let rtdr = tape.rot.transpose() * d_sigma3 * tape.rot;
    let d_log_scale = Vector3::new(
        2.0 * s.x * s.x * rtdr[(0, 0)],
        2.0 * s.y * s.y * rtdr[(1, 1)],
        2.0 * s.z * s.z * rtdr[(2, 2)],
    );

    // μ_cam = W (μ − T).
    let d_mu = w_mat.transpose() * d_mu_cam;

    // Quaternion chain through normalization.
    let q_unit = kern.quat_normalized();
    let d_q_unit = quat_to_matrix_backward(&q_unit, &d_rot);
    let d_rot_raw = normalize_backward(&kern.rot, &d_q_unit);

    KernelGrad {
        mu: d_mu,
        rot: d_rot_raw,
        log_scale: d_log_scale,
        opacity_logit: dsigmoid(kern.opacity_logit) * acc.d_op,
        color_logit: Vector3::new(
            dsigmoid(kern.color_logit.x) * acc.d_color.x,
            dsigmoid(kern.color_logit.y) * acc.d_color.y,
            dsigmoid(kern.color_logit.z) * acc.d_color.z,
        ),
    }
}
