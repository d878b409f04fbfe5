//! Single-iteration objective: decode the active anchors, render, evaluate
//! every loss term, and push gradients back to each trainable block.
//!
//! Pixel and patch selections made during a live evaluation can be replayed
//! through `frozen`, which keeps the objective smooth under finite-difference
//! probing while the continuous part is re-evaluated from scratch.

use nalgebra::Vector3;

use crate::field::decoder::{
    decode_anchor, decode_anchor_backward, AnchorGrads, DecodeTape, DecoderGrads, DecoderWeights,
};
use crate::field::{AnchorGrid, GaussianKernel};
use crate::loss::appearance::{
    appearance_loss, apply_appearance, apply_appearance_backward, AppearanceGrads,
    AppearanceModel,
};
use crate::loss::flatten::flatten_loss;
use crate::loss::local::{local_geom_loss, LocalWeight};
use crate::loss::multiview::{
    geo_select, geometric_consistency, multiview_photometric_loss, photometric_contributors,
    GeoEntry, PhotoEntry, PlaneBuffers,
};
use crate::loss::{LossComponents, LossWeights, OcclusionConfig, PatchConfig};
use crate::render::{
    depth_backward, forward, prepare, render_backward, RenderBuffers, RenderOptions, Upstream,
};
use crate::scene::{relative_transform, CameraIntrinsics, ImageBuffer, PixelCoord, View};

use super::TrainError;

/// Everything one objective evaluation reads.
pub struct ObjectiveInputs<'a> {
    pub grid: &'a AnchorGrid,
    /// Active anchor indices, ascending grid order.
    pub active: &'a [usize],
    pub decoder: &'a DecoderWeights,
    pub appearance: &'a AppearanceModel,
    pub views: &'a [View],
    pub ref_view: usize,
    pub nbr_view: Option<usize>,
    pub weights: &'a LossWeights,
    pub patch: &'a PatchConfig,
    pub occlusion: &'a OcclusionConfig,
    pub local_weight: LocalWeight,
    pub opts: &'a RenderOptions,
    pub background: Vector3<f64>,
    pub iter: u64,
}

/// Discrete choices made during a live evaluation.
#[derive(Debug, Clone)]
pub struct Selections {
    pub ref_depth_valid: Vec<bool>,
    pub nbr_depth_valid: Option<Vec<bool>>,
    pub photo: Option<Vec<PhotoEntry>>,
    pub geo: Option<Vec<GeoEntry>>,
}

/// Per-kernel observations consumed by the densification statistics.
#[derive(Debug, Clone, Copy)]
pub struct KernelStat {
    /// Position in `ObjectiveInputs::active`.
    pub anchor_slot: usize,
    pub mu: Vector3<f64>,
    pub opacity: f64,
    pub grad_mag: f64,
}

/// Gradients for every trainable block touched this iteration.
pub struct Gradients {
    /// Parallel to `ObjectiveInputs::active`.
    pub anchors: Vec<AnchorGrads>,
    pub decoder: DecoderGrads,
    /// `d_emb` applies to the reference view's embedding.
    pub appearance: AppearanceGrads,
    pub kernel_stats: Vec<KernelStat>,
}

pub struct Evaluation {
    pub components: LossComponents,
    pub total: f64,
    pub selections: Selections,
    pub grads: Gradients,
}

/// Ray-plane depth at exactly the given pixels, skipping the live validity
/// gates so a replayed mask sees a smooth function.
fn depth_at_mask(
    normal: &ImageBuffer,
    plane_dist: &ImageBuffer,
    k: &CameraIntrinsics,
    mask: &[bool],
) -> ImageBuffer {
    let (w, h) = (normal.width, normal.height);
    let mut depth = ImageBuffer::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let ray = k.ray_dir(PixelCoord::new(x as f64, y as f64));
            let denom = normal.pixel3(x, y).dot(&ray);
            depth.set(x, y, 0, plane_dist.get(x, y, 0) / denom);
        }
    }
    depth
}

struct Decoded {
    kernels: Vec<GaussianKernel>,
    tapes: Vec<DecodeTape>,
    /// Kernel range of each active anchor.
    ranges: Vec<(usize, usize)>,
}

fn decode_active(inp: &ObjectiveInputs) -> Result<Decoded, TrainError> {
    let cam = inp.views[inp.ref_view].pose.center();
    let anchors = inp.grid.anchors();
    let mut kernels = Vec::with_capacity(inp.active.len() * inp.decoder.n_offsets);
    let mut tapes = Vec::with_capacity(inp.active.len());
    let mut ranges = Vec::with_capacity(inp.active.len());
    for &ai in inp.active {
        let a = &anchors[ai];
        let v = inp.grid.cfg.voxel_size(a.level);
        let (ks, tape) = decode_anchor(a, inp.decoder, &cam, v, inp.grid.cfg.d_max)?;
        let start = kernels.len();
        kernels.extend(ks);
        ranges.push((start, kernels.len()));
        tapes.push(tape);
    }
    Ok(Decoded { kernels, tapes, ranges })
}

/// Evaluate the training objective and its gradients for one reference view.
///
/// With `frozen` set, the given selections replace the live ones; the caller
/// must supply selections produced on the same view pair.
pub fn evaluate(
    inp: &ObjectiveInputs,
    frozen: Option<&Selections>,
) -> Result<Evaluation, TrainError> {
    if inp.active.is_empty() {
        return Err(TrainError::NothingVisible { view: inp.views[inp.ref_view].id as usize });
    }
    let view = &inp.views[inp.ref_view];
    let k_ref = &view.intrinsics;
    let decoded = decode_active(inp)?;

    let prep = prepare(&decoded.kernels, view, inp.opts);
    let bufs = forward(&prep, view, &inp.background, inp.opts);
    let (w, h) = (bufs.width(), bufs.height());

    // Photometric fit of the reference view.
    let emb_index = view.embedding_id;
    let (adjusted, app_tape) = apply_appearance(inp.appearance, &bufs.color, emb_index)?;
    let app = appearance_loss(
        &bufs.color,
        &adjusted,
        &view.image,
        inp.weights.lambda,
        inp.weights.dssim_on_adjusted,
        1.0,
    )?;
    let (d_color_app, app_grads) =
        apply_appearance_backward(inp.appearance, &bufs.color, &app_tape, &app.d_adjusted);
    let mut d_color = app.d_render;
    for (dst, src) in d_color.data.iter_mut().zip(&d_color_app.data) {
        *dst += src;
    }

    // Scale flattening on the decoded kernels.
    let (flat, flat_grads) = flatten_loss(&decoded.kernels)?;

    // Depth-normal agreement on the reference view.
    let ref_valid: Vec<bool> = match frozen {
        Some(s) => s.ref_depth_valid.clone(),
        None => bufs.depth_valid.clone(),
    };
    let depth = if frozen.is_some() {
        depth_at_mask(&bufs.normal, &bufs.plane_dist, k_ref, &ref_valid)
    } else {
        bufs.depth.clone()
    };
    let local = local_geom_loss(
        &depth,
        &ref_valid,
        &bufs.normal,
        k_ref,
        &inp.local_weight,
        inp.weights.w_local,
    )?;

    let mut d_normal = local.d_normal;
    let mut d_plane_dist = ImageBuffer::zeros(w, h, 1);
    depth_backward(
        &bufs.normal,
        &bufs.plane_dist,
        &ref_valid,
        k_ref,
        &local.d_depth,
        &mut d_normal,
        &mut d_plane_dist,
    );

    // Multi-view consistency against one neighbor.
    let mv_on = LossComponents::mv_active(inp.weights, inp.iter) && inp.nbr_view.is_some();
    let mut ncc_loss = 0.0;
    let mut geo_loss = 0.0;
    let mut nbr_backprop: Option<(RenderBuffers, Upstream)> = None;
    let mut selections = Selections {
        ref_depth_valid: ref_valid.clone(),
        nbr_depth_valid: None,
        photo: None,
        geo: None,
    };
    let mut nbr_prep = None;
    if mv_on {
        let nbr = &inp.views[inp.nbr_view.unwrap()];
        let k_nbr = &nbr.intrinsics;
        let rel = relative_transform(&view.pose, &nbr.pose);
        let prep_n = prepare(&decoded.kernels, nbr, inp.opts);
        let bufs_n = forward(&prep_n, nbr, &inp.background, inp.opts);
        let nbr_valid: Vec<bool> = match frozen {
            Some(s) => s
                .nbr_depth_valid
                .clone()
                .unwrap_or_else(|| vec![false; bufs_n.depth_valid.len()]),
            None => bufs_n.depth_valid.clone(),
        };
        let ref_planes = PlaneBuffers {
            normal: &bufs.normal,
            plane_dist: &bufs.plane_dist,
            valid: &ref_valid,
        };
        let nbr_planes = PlaneBuffers {
            normal: &bufs_n.normal,
            plane_dist: &bufs_n.plane_dist,
            valid: &nbr_valid,
        };
        let luma_ref = view.image.to_luma();
        let luma_nbr = nbr.image.to_luma();

        let (photo_entries, geo_entries) = match frozen {
            Some(s) => (
                s.photo.clone().unwrap_or_default(),
                s.geo.clone().unwrap_or_default(),
            ),
            None => {
                let sel = geo_select(&ref_planes, &nbr_planes, k_ref, k_nbr, &rel, inp.occlusion);
                let photo = photometric_contributors(
                    &ref_planes,
                    &luma_ref,
                    &luma_nbr,
                    k_ref,
                    k_nbr,
                    &rel,
                    inp.patch,
                    &sel.mask,
                );
                (photo, sel.entries)
            }
        };

        let photo = multiview_photometric_loss(
            &photo_entries,
            &ref_planes,
            &luma_ref,
            &luma_nbr,
            k_ref,
            k_nbr,
            &rel,
            inp.patch,
            inp.weights.w_mv,
        );
        ncc_loss = photo.loss;
        let geo = geometric_consistency(
            &geo_entries,
            &ref_planes,
            &nbr_planes,
            k_ref,
            k_nbr,
            &rel,
            inp.weights.w_mv,
        );
        geo_loss = geo.loss;

        for (dst, src) in d_normal.data.iter_mut().zip(&photo.d_ref.d_normal.data) {
            *dst += src;
        }
        for (dst, src) in d_plane_dist.data.iter_mut().zip(&photo.d_ref.d_plane_dist.data) {
            *dst += src;
        }
        for (dst, src) in d_normal.data.iter_mut().zip(&geo.d_ref.d_normal.data) {
            *dst += src;
        }
        for (dst, src) in d_plane_dist.data.iter_mut().zip(&geo.d_ref.d_plane_dist.data) {
            *dst += src;
        }

        let mut up_n = Upstream::zeros(bufs_n.width(), bufs_n.height());
        up_n.normal = geo.d_nbr.d_normal;
        up_n.plane_dist = geo.d_nbr.d_plane_dist;
        nbr_backprop = Some((bufs_n, up_n));
        nbr_prep = Some(prep_n);
        selections.nbr_depth_valid = Some(nbr_valid);
        selections.photo = Some(photo_entries);
        selections.geo = Some(geo_entries);
    }

    let components = LossComponents {
        appearance: app.loss,
        flatten: flat,
        local: local.loss,
        ncc: ncc_loss,
        geo: geo_loss,
    };
    let total = components.total(inp.weights, inp.iter);

    // Reverse through both renders into per-kernel gradients.
    let mut upstream = Upstream::zeros(w, h);
    upstream.color = d_color;
    upstream.normal = d_normal;
    upstream.plane_dist = d_plane_dist;
    let mut kernel_grads =
        render_backward(&prep, &decoded.kernels, view, &inp.background, inp.opts, &upstream);
    if let (Some((_, up_n)), Some(prep_n)) = (&nbr_backprop, &nbr_prep) {
        let nbr = &inp.views[inp.nbr_view.unwrap()];
        let nbr_grads = render_backward(
            prep_n,
            &decoded.kernels,
            nbr,
            &inp.background,
            inp.opts,
            up_n,
        );
        for (dst, src) in kernel_grads.iter_mut().zip(&nbr_grads) {
            dst.add(src);
        }
    }
    for (g, fg) in kernel_grads.iter_mut().zip(&flat_grads) {
        g.log_scale += fg * inp.weights.w_flatten;
    }

    // Fold kernel gradients back through the decoder.
    let anchors = inp.grid.anchors();
    let mut dec_grads = DecoderGrads::zeros(inp.decoder);
    let mut anchor_grads = Vec::with_capacity(inp.active.len());
    let mut kernel_stats = Vec::with_capacity(decoded.kernels.len());
    for (slot, &ai) in inp.active.iter().enumerate() {
        let (start, end) = decoded.ranges[slot];
        let v = inp.grid.cfg.voxel_size(anchors[ai].level);
        let grads_slice = &kernel_grads[start..end];
        let ag = decode_anchor_backward(
            inp.decoder,
            v,
            &decoded.tapes[slot],
            grads_slice,
            &mut dec_grads,
        );
        anchor_grads.push(ag);
        for (k, g) in decoded.kernels[start..end].iter().zip(grads_slice) {
            kernel_stats.push(KernelStat {
                anchor_slot: slot,
                mu: k.mu,
                opacity: k.opacity(),
                grad_mag: g.mu.norm(),
            });
        }
    }

    Ok(Evaluation {
        components,
        total,
        selections,
        grads: Gradients {
            anchors: anchor_grads,
            decoder: dec_grads,
            appearance: app_grads,
            kernel_stats,
        },
    })
}
