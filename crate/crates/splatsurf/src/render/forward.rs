//! Forward compositing pass.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{
    accumulate_pixel, depth_from_plane, prepare_splat, RenderBuffers, RenderOptions, SplatTape,
};
use crate::field::GaussianKernel;
use crate::scene::{ImageBuffer, View};

/// Projected splats sorted front-to-back plus per-row index buckets.
pub struct PreparedScene {
    pub(crate) tapes: Vec<SplatTape>,
    pub(crate) row_buckets: Vec<Vec<u32>>,
    pub n_kernels: usize,
    pub width: usize,
    pub height: usize,
}

impl PreparedScene {
    pub fn n_splats(&self) -> usize {
        self.tapes.len()
    }
}

/// Project every kernel and build the compositing order: depth ascending,
/// ties broken by kernel index so rendering is invariant to input order.
pub fn prepare(kernels: &[GaussianKernel], view: &View, opts: &RenderOptions) -> PreparedScene {
    let mut tapes: Vec<SplatTape> = kernels
        .iter()
        .enumerate()
        .filter_map(|(i, k)| prepare_splat(k, i as u32, view, opts))
        .collect();
    tapes.sort_by(|a, b| {
        a.splat
            .depth_key
            .partial_cmp(&b.splat.depth_key)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.splat.kernel_index.cmp(&b.splat.kernel_index))
    });
    let height = view.intrinsics.height;
    let mut row_buckets = vec![Vec::new(); height];
    for (si, t) in tapes.iter().enumerate() {
        for y in t.y0..=t.y1 {
            row_buckets[y as usize].push(si as u32);
        }
    }
    PreparedScene {
        tapes,
        row_buckets,
        n_kernels: kernels.len(),
        width: view.intrinsics.width,
        height,
    }
}

/// Composite the prepared splats. Rows are processed in parallel and written
/// in index order, so the output is identical for any worker count.
pub fn forward(
    prep: &PreparedScene,
    view: &View,
    background: &Vector3<f64>,
    opts: &RenderOptions,
) -> RenderBuffers {
    let (w, h) = (prep.width, prep.height);
    struct Row {
        color: Vec<f64>,
        normal: Vec<f64>,
        plane_dist: Vec<f64>,
        alpha: Vec<f64>,
    }
    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Row {
                color: vec![0.0; 3 * w],
                normal: vec![0.0; 3 * w],
                plane_dist: vec![0.0; w],
                alpha: vec![0.0; w],
            };
            let bucket = &prep.row_buckets[y];
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let t_final = accumulate_pixel(
                    &prep.tapes,
                    bucket,
                    px,
                    py,
                    opts,
                    |_si, tape, alpha, _g, _clamped, t| {
                        let wgt = alpha * t;
                        for c in 0..3 {
                            row.color[3 * x + c] += tape.color[c] * wgt;
                            row.normal[3 * x + c] += tape.splat.cam_normal[c] * wgt;
                        }
                        row.plane_dist[x] += tape.splat.plane_dist * wgt;
                    },
                );
                for c in 0..3 {
                    row.color[3 * x + c] += background[c] * t_final;
                }
                row.alpha[x] = 1.0 - t_final;
            }
            row
        })
        .collect();

    let mut color = ImageBuffer::zeros(w, h, 3);
    let mut normal = ImageBuffer::zeros(w, h, 3);
    let mut plane_dist = ImageBuffer::zeros(w, h, 1);
    let mut alpha = ImageBuffer::zeros(w, h, 1);
    for (y, row) in rows.into_iter().enumerate() {
        color.data[3 * w * y..3 * w * (y + 1)].copy_from_slice(&row.color);
        normal.data[3 * w * y..3 * w * (y + 1)].copy_from_slice(&row.normal);
        plane_dist.data[w * y..w * (y + 1)].copy_from_slice(&row.plane_dist);
        alpha.data[w * y..w * (y + 1)].copy_from_slice(&row.alpha);
    }
    let (depth, depth_valid) =
        depth_from_plane(&normal, &plane_dist, &alpha, &view.intrinsics, opts);
    RenderBuffers {
        color,
        normal,
        plane_dist,
        alpha,
        depth,
        depth_valid,
    }
}
