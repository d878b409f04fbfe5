//! Multi-view consistency terms: patch correlation under plane-induced warps
//! and forward/backward reprojection agreement.
//!
//! Pixel selections (sample grids, occlusion masks, warp landing pixels) are
//! computed once and passed to the evaluation functions explicitly, so a
//! caller can hold them fixed while probing the differentiable part.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::loss::homography::{
    invert_relative, plane_homography, plane_homography_backward, warp_pixel,
    warp_pixel_backward,
};
use crate::loss::ncc::{ncc, ncc_backward_b};
use crate::loss::{OcclusionConfig, PatchConfig};
use crate::render::RenderBuffers;
use crate::scene::{CameraIntrinsics, ImageBuffer, PixelCoord, View};

const MIN_PLANE_DIST: f64 = 1e-9;
const MIN_PATCH_VARIANCE: f64 = 1e-12;

/// One view's rendered plane parameters plus their validity mask.
pub struct PlaneBuffers<'a> {
    pub normal: &'a ImageBuffer,
    pub plane_dist: &'a ImageBuffer,
    pub valid: &'a [bool],
}

impl<'a> PlaneBuffers<'a> {
    pub fn from_render(bufs: &'a RenderBuffers) -> Self {
        PlaneBuffers {
            normal: &bufs.normal,
            plane_dist: &bufs.plane_dist,
            valid: &bufs.depth_valid,
        }
    }

    fn width(&self) -> usize {
        self.normal.width
    }

    fn height(&self) -> usize {
        self.normal.height
    }

    /// Plane through the surface at this pixel as `nᵀx + d = 0`, or `None`
    /// when nothing usable was rendered here.
    fn plane_at(&self, x: usize, y: usize) -> Option<(Vector3<f64>, f64)> {
        if !self.valid[y * self.width() + x] {
            return None;
        }
        let n = self.normal.pixel3(x, y);
        let pd = self.plane_dist.get(x, y, 0);
        if n.norm() < 1e-12 || pd.abs() < MIN_PLANE_DIST {
            return None;
        }
        Some((n, -pd))
    }
}

/// Gradients routed back into one view's rendered plane buffers.
#[derive(Debug, Clone)]
pub struct PlaneGrads {
    pub d_normal: ImageBuffer,
    pub d_plane_dist: ImageBuffer,
}

impl PlaneGrads {
    fn zeros(w: usize, h: usize) -> Self {
        PlaneGrads {
            d_normal: ImageBuffer::zeros(w, h, 3),
            d_plane_dist: ImageBuffer::zeros(w, h, 1),
        }
    }

    fn add_at(&mut self, x: usize, y: usize, d_n: &Vector3<f64>, d_dparam: f64) {
        self.d_normal.add(x, y, 0, d_n.x);
        self.d_normal.add(x, y, 1, d_n.y);
        self.d_normal.add(x, y, 2, d_n.z);
        // Plane parameter is the negated rendered distance.
        self.d_plane_dist.add(x, y, 0, -d_dparam);
    }
}

/// Indices of the nearest views whose forward axis roughly agrees with the
/// reference view's, nearest first.
pub fn select_neighbors(views: &[View], ref_idx: usize, k: usize) -> Vec<usize> {
    let fwd = |v: &View| v.pose.rotation * Vector3::z();
    let ref_fwd = fwd(&views[ref_idx]);
    let ref_center = views[ref_idx].pose.center();
    let mut cands: Vec<(f64, usize)> = views
        .iter()
        .enumerate()
        .filter(|(i, v)| *i != ref_idx && fwd(v).dot(&ref_fwd) > 0.0)
        .map(|(i, v)| ((v.pose.center() - ref_center).norm(), i))
        .collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Reference pixel chosen as an NCC patch center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoEntry {
    pub x: usize,
    pub y: usize,
}

/// Sample-grid pixels whose patch warps cleanly into the neighbor view and
/// whose reference patch carries texture.
#[allow(clippy::too_many_arguments)]
pub fn photometric_contributors(
    ref_planes: &PlaneBuffers,
    luma_ref: &ImageBuffer,
    luma_nbr: &ImageBuffer,
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    cfg: &PatchConfig,
    occ: &[bool],
) -> Vec<PhotoEntry> {
    let (w, h) = (ref_planes.width(), ref_planes.height());
    let hs = cfg.half_size;
    let mut out = Vec::new();
    if w < 2 * hs + 1 || h < 2 * hs + 1 {
        return out;
    }
    let mut y = hs;
    while y < h - hs {
        let mut x = hs;
        while x < w - hs {
            if occ[y * w + x] {
                if let Some((n, d)) = ref_planes.plane_at(x, y) {
                    if let Ok(hmat) = plane_homography(k_ref, k_nbr, rel, &n, d) {
                        if patch_usable(&hmat, luma_ref, luma_nbr, x, y, hs) {
                            out.push(PhotoEntry { x, y });
                        }
                    }
                }
            }
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    out
}

fn patch_usable(
    hmat: &Matrix3<f64>,
    luma_ref: &ImageBuffer,
    luma_nbr: &ImageBuffer,
    x: usize,
    y: usize,
    hs: usize,
) -> bool {
    let (mut sum, mut sum2, mut n) = (0.0, 0.0, 0.0);
    for dy in -(hs as i64)..=hs as i64 {
        for dx in -(hs as i64)..=hs as i64 {
            let px = (x as i64 + dx) as f64;
            let py = (y as i64 + dy) as f64;
            let q = match warp_pixel(hmat, PixelCoord::new(px, py)) {
                Ok(q) => q,
                Err(_) => return false,
            };
            if q.u < 0.0
                || q.u > (luma_nbr.width - 1) as f64
                || q.v < 0.0
                || q.v > (luma_nbr.height - 1) as f64
            {
                return false;
            }
            let a = luma_ref.get(px as usize, py as usize, 0);
            sum += a;
            sum2 += a * a;
            n += 1.0;
        }
    }
    sum2 - sum * sum / n > MIN_PATCH_VARIANCE
}

#[derive(Debug)]
pub struct PhotoResult {
    pub loss: f64,
    pub count: usize,
    pub d_ref: PlaneGrads,
}

/// Mean (1 − NCC) between reference patches and their plane-warped neighbor
/// samples, over the given contributor pixels. Gradients reach the reference
/// plane buffers through each patch's homography.
#[allow(clippy::too_many_arguments)]
pub fn multiview_photometric_loss(
    entries: &[PhotoEntry],
    ref_planes: &PlaneBuffers,
    luma_ref: &ImageBuffer,
    luma_nbr: &ImageBuffer,
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    cfg: &PatchConfig,
    d_loss: f64,
) -> PhotoResult {
    let (w, h) = (ref_planes.width(), ref_planes.height());
    let mut d_ref = PlaneGrads::zeros(w, h);
    if entries.is_empty() {
        return PhotoResult { loss: 0.0, count: 0, d_ref };
    }
    let hs = cfg.half_size as i64;
    let patch_len = ((2 * hs + 1) * (2 * hs + 1)) as usize;
    let inv_n = 1.0 / entries.len() as f64;
    let mut loss = 0.0;
    let mut patch_a = vec![0.0; patch_len];
    let mut patch_b = vec![0.0; patch_len];
    let mut grads_uv = vec![(0.0, 0.0); patch_len];
    let mut coords = vec![PixelCoord::new(0.0, 0.0); patch_len];
    for e in entries {
        let Some((n, d)) = ref_planes.plane_at(e.x, e.y) else { continue };
        let Ok(hmat) = plane_homography(k_ref, k_nbr, rel, &n, d) else { continue };
        let mut ok = true;
        let mut j = 0;
        'patch: for dy in -hs..=hs {
            for dx in -hs..=hs {
                let px = e.x as i64 + dx;
                let py = e.y as i64 + dy;
                let p = PixelCoord::new(px as f64, py as f64);
                let q = match warp_pixel(&hmat, p) {
                    Ok(q) => q,
                    Err(_) => {
                        ok = false;
                        break 'patch;
                    }
                };
                let (val, du, dv) = luma_nbr.sample_bilinear_grad(q.u, q.v);
                patch_a[j] = luma_ref.get(px as usize, py as usize, 0);
                patch_b[j] = val;
                grads_uv[j] = (du, dv);
                coords[j] = p;
                j += 1;
            }
        }
        if !ok {
            continue;
        }
        let value = ncc(&patch_a, &patch_b);
        loss += (1.0 - value) * inv_n;

        let d_ncc = -d_loss * inv_n;
        let d_b = ncc_backward_b(&patch_a, &patch_b, d_ncc);
        let mut d_h = Matrix3::zeros();
        for j in 0..patch_len {
            let d_q = Vector2::new(d_b[j] * grads_uv[j].0, d_b[j] * grads_uv[j].1);
            let (d_h_j, _) = warp_pixel_backward(&hmat, coords[j], d_q);
            d_h += d_h_j;
        }
        let (d_n, d_d) = plane_homography_backward(k_ref, k_nbr, rel, &n, d, &d_h);
        d_ref.add_at(e.x, e.y, &d_n, d_d);
    }
    PhotoResult { loss, count: entries.len(), d_ref }
}

/// Reference pixel in the reprojection set together with its frozen landing
/// pixel in the neighbor view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoEntry {
    pub x: usize,
    pub y: usize,
    pub lx: usize,
    pub ly: usize,
}

/// Occlusion classification of every reference pixel plus the surviving set.
#[derive(Debug, Clone)]
pub struct GeoSelection {
    pub mask: Vec<bool>,
    pub entries: Vec<GeoEntry>,
}

/// Classifies each reference pixel by round-trip reprojection error against
/// the occlusion threshold.
pub fn geo_select(
    ref_planes: &PlaneBuffers,
    nbr_planes: &PlaneBuffers,
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    occ: &OcclusionConfig,
) -> GeoSelection {
    let (w, h) = (ref_planes.width(), ref_planes.height());
    let mut mask = vec![false; w * h];
    let mut entries = Vec::new();
    let rel_inv = invert_relative(rel);
    for y in 0..h {
        for x in 0..w {
            let Some(rt) = round_trip(ref_planes, nbr_planes, k_ref, k_nbr, rel, &rel_inv, x, y)
            else {
                continue;
            };
            if rt.err <= occ.pixel_threshold {
                mask[y * w + x] = true;
                entries.push(GeoEntry { x, y, lx: rt.lx, ly: rt.ly });
            }
        }
    }
    GeoSelection { mask, entries }
}

struct RoundTrip {
    err: f64,
    lx: usize,
    ly: usize,
}

fn round_trip(
    ref_planes: &PlaneBuffers,
    nbr_planes: &PlaneBuffers,
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    rel_inv: &(Matrix3<f64>, Vector3<f64>),
    x: usize,
    y: usize,
) -> Option<RoundTrip> {
    let (n_r, d_r) = ref_planes.plane_at(x, y)?;
    let h_rn = plane_homography(k_ref, k_nbr, rel, &n_r, d_r).ok()?;
    let p = PixelCoord::new(x as f64, y as f64);
    let q = warp_pixel(&h_rn, p).ok()?;
    let lx = q.u.round();
    let ly = q.v.round();
    if lx < 0.0
        || lx > (nbr_planes.width() - 1) as f64
        || ly < 0.0
        || ly > (nbr_planes.height() - 1) as f64
    {
        return None;
    }
    let (lx, ly) = (lx as usize, ly as usize);
    let (n_n, d_n) = nbr_planes.plane_at(lx, ly)?;
    let h_nr = plane_homography(k_nbr, k_ref, rel_inv, &n_n, d_n).ok()?;
    let back = warp_pixel(&h_nr, q).ok()?;
    let err = ((back.u - p.u).powi(2) + (back.v - p.v).powi(2)).sqrt();
    Some(RoundTrip { err, lx, ly })
}

#[derive(Debug)]
pub struct GeoResult {
    pub loss: f64,
    pub count: usize,
    pub d_ref: PlaneGrads,
    pub d_nbr: PlaneGrads,
}

/// Mean round-trip reprojection error over the selected pixels. Gradients
/// reach both views' plane buffers; landing pixels stay as selected.
pub fn geometric_consistency(
    entries: &[GeoEntry],
    ref_planes: &PlaneBuffers,
    nbr_planes: &PlaneBuffers,
    k_ref: &CameraIntrinsics,
    k_nbr: &CameraIntrinsics,
    rel: &(Matrix3<f64>, Vector3<f64>),
    d_loss: f64,
) -> GeoResult {
    let mut d_ref = PlaneGrads::zeros(ref_planes.width(), ref_planes.height());
    let mut d_nbr = PlaneGrads::zeros(nbr_planes.width(), nbr_planes.height());
    if entries.is_empty() {
        return GeoResult { loss: 0.0, count: 0, d_ref, d_nbr };
    }
    let rel_inv = invert_relative(rel);
    let inv_n = 1.0 / entries.len() as f64;
    let mut loss = 0.0;
    for e in entries {
        let Some((n_r, d_r)) = ref_planes.plane_at(e.x, e.y) else { continue };
        let Ok(h_rn) = plane_homography(k_ref, k_nbr, rel, &n_r, d_r) else { continue };
        let p = PixelCoord::new(e.x as f64, e.y as f64);
        let Ok(q) = warp_pixel(&h_rn, p) else { continue };
        let Some((n_n, d_n)) = nbr_planes.plane_at(e.lx, e.ly) else { continue };
        let Ok(h_nr) = plane_homography(k_nbr, k_ref, &rel_inv, &n_n, d_n) else { continue };
        let Ok(back) = warp_pixel(&h_nr, q) else { continue };
        let du = back.u - p.u;
        let dv = back.v - p.v;
        let err = (du * du + dv * dv).sqrt();
        loss += err * inv_n;
        if err < 1e-12 {
            continue;
        }
        let d_back = Vector2::new(du / err, dv / err) * (d_loss * inv_n);
        let (d_h_nr, d_q) = warp_pixel_backward(&h_nr, q, d_back);
        let (d_n_n, d_d_n) = plane_homography_backward(k_nbr, k_ref, &rel_inv, &n_n, d_n, &d_h_nr);
        d_nbr.add_at(e.lx, e.ly, &d_n_n, d_d_n);
        let (d_h_rn, _) = warp_pixel_backward(&h_rn, p, d_q);
        let (d_n_r, d_d_r) = plane_homography_backward(k_ref, k_nbr, rel, &n_r, d_r, &d_h_rn);
        d_ref.add_at(e.x, e.y, &d_n_r, d_d_r);
    }
    GeoResult { loss, count: entries.len(), d_ref, d_nbr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{relative_transform, CameraPose};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: usize = 32;
    const H: usize = 32;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, W, H)
    }

    fn texture(x: f64, y: f64) -> f64 {
        0.5 + 0.25 * (3.0 * x).sin() * (2.0 * y).cos() + 0.15 * (5.0 * x + 1.0).cos()
    }

    /// Photograph of the textured plane z = 2 from a camera at `center`
    /// (axis-aligned, looking along +z).
    fn plane_photo(center: &Vector3<f64>) -> ImageBuffer {
        let k = intr();
        let mut img = ImageBuffer::zeros(W, H, 1);
        for y in 0..H {
            for x in 0..W {
                let ray = k.ray_dir(PixelCoord::new(x as f64, y as f64));
                let t = (2.0 - center.z) / ray.z;
                let wx = center.x + ray.x * t;
                let wy = center.y + ray.y * t;
                img.set(x, y, 0, texture(wx, wy));
            }
        }
        img
    }

    /// Constant plane buffers for the z = 2 wall seen from a camera at `center`.
    fn wall_buffers(center: &Vector3<f64>) -> (ImageBuffer, ImageBuffer, Vec<bool>) {
        let mut normal = ImageBuffer::zeros(W, H, 3);
        let mut pd = ImageBuffer::zeros(W, H, 1);
        for y in 0..H {
            for x in 0..W {
                normal.set(x, y, 2, -1.0);
                pd.set(x, y, 0, -(2.0 - center.z));
            }
        }
        (normal, pd, vec![true; W * H])
    }

    fn baseline_rel() -> (Matrix3<f64>, Vector3<f64>) {
        let ref_pose = CameraPose::identity();
        let nbr_pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0));
        relative_transform(&ref_pose, &nbr_pose)
    }

    #[test]
    fn photometric_on_true_plane_is_small() {
        let luma_ref = plane_photo(&Vector3::zeros());
        let luma_nbr = plane_photo(&Vector3::new(0.1, 0.0, 0.0));
        let (normal, pd, valid) = wall_buffers(&Vector3::zeros());
        let planes = PlaneBuffers { normal: &normal, plane_dist: &pd, valid: &valid };
        let rel = baseline_rel();
        let cfg = PatchConfig::default();
        let occ = vec![true; W * H];
        let entries = photometric_contributors(
            &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, &occ,
        );
        assert!(entries.len() > 20, "only {} contributors", entries.len());
        let r = multiview_photometric_loss(
            &entries, &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, 1.0,
        );
        assert!(r.loss < 1e-3, "loss = {}", r.loss);
    }

    #[test]
    fn self_neighbor_costs_nothing() {
        let luma = plane_photo(&Vector3::zeros());
        let (normal, pd, valid) = wall_buffers(&Vector3::zeros());
        let planes = PlaneBuffers { normal: &normal, plane_dist: &pd, valid: &valid };
        let rel = (Matrix3::identity(), Vector3::zeros());
        let cfg = PatchConfig::default();
        let occ = vec![true; W * H];
        let entries =
            photometric_contributors(&planes, &luma, &luma, &intr(), &intr(), &rel, &cfg, &occ);
        let r = multiview_photometric_loss(
            &entries, &planes, &luma, &luma, &intr(), &intr(), &rel, &cfg, 1.0,
        );
        assert!(r.loss < 1e-6, "loss = {}", r.loss);
    }

    #[test]
    fn wrong_plane_distance_costs_more() {
        let luma_ref = plane_photo(&Vector3::zeros());
        let luma_nbr = plane_photo(&Vector3::new(0.1, 0.0, 0.0));
        let (normal, pd, valid) = wall_buffers(&Vector3::zeros());
        let rel = baseline_rel();
        let cfg = PatchConfig::default();
        let occ = vec![true; W * H];
        let eval = |pd_buf: &ImageBuffer| {
            let planes = PlaneBuffers { normal: &normal, plane_dist: pd_buf, valid: &valid };
            let entries = photometric_contributors(
                &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, &occ,
            );
            multiview_photometric_loss(
                &entries, &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, 1.0,
            )
            .loss
        };
        let base = eval(&pd);
        for scale in [0.95, 1.05] {
            let mut perturbed = pd.clone();
            for v in perturbed.data.iter_mut() {
                *v *= scale;
            }
            let worse = eval(&perturbed);
            assert!(
                worse > base + 1e-6,
                "scale {}: {} !> {}",
                scale,
                worse,
                base
            );
        }
    }

    #[test]
    fn photometric_backward_matches_finite_differences() {
        let luma_ref = plane_photo(&Vector3::zeros());
        let luma_nbr = plane_photo(&Vector3::new(0.1, 0.0, 0.0));
        let (mut normal, mut pd, valid) = wall_buffers(&Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for v in normal.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        for v in pd.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let rel = baseline_rel();
        let cfg = PatchConfig::default();
        let occ = vec![true; W * H];
        let entries = {
            let planes = PlaneBuffers { normal: &normal, plane_dist: &pd, valid: &valid };
            photometric_contributors(
                &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, &occ,
            )
        };
        assert!(!entries.is_empty());
        let d_loss = 1.1;
        let eval = |normal: &ImageBuffer, pd: &ImageBuffer| {
            let planes = PlaneBuffers { normal, plane_dist: pd, valid: &valid };
            multiview_photometric_loss(
                &entries, &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, 1.0,
            )
            .loss
        };
        let r = {
            let planes = PlaneBuffers { normal: &normal, plane_dist: &pd, valid: &valid };
            multiview_photometric_loss(
                &entries, &planes, &luma_ref, &luma_nbr, &intr(), &intr(), &rel, &cfg, d_loss,
            )
        };
        let eps = 1e-6;
        for e in entries.iter().take(6) {
            for c in 0..3 {
                let i = normal.idx(e.x, e.y, c);
                let orig = normal.data[i];
                normal.data[i] = orig + eps;
                let lp = eval(&normal, &pd);
                normal.data[i] = orig - eps;
                let lm = eval(&normal, &pd);
                normal.data[i] = orig;
                let fd = d_loss * (lp - lm) / (2.0 * eps);
                assert_relative_eq!(
                    r.d_ref.d_normal.data[i],
                    fd,
                    epsilon = 1e-9,
                    max_relative = 1e-4
                );
            }
            let i = pd.idx(e.x, e.y, 0);
            let orig = pd.data[i];
            pd.data[i] = orig + eps;
            let lp = eval(&normal, &pd);
            pd.data[i] = orig - eps;
            let lm = eval(&normal, &pd);
            pd.data[i] = orig;
            let fd = d_loss * (lp - lm) / (2.0 * eps);
            assert_relative_eq!(
                r.d_ref.d_plane_dist.data[i],
                fd,
                epsilon = 1e-9,
                max_relative = 1e-4
            );
        }
    }

    #[test]
    fn consistent_planes_have_zero_roundtrip_error() {
        let (normal_r, pd_r, valid_r) = wall_buffers(&Vector3::zeros());
        let (normal_n, pd_n, valid_n) = wall_buffers(&Vector3::new(0.1, 0.0, 0.0));
        let refp = PlaneBuffers { normal: &normal_r, plane_dist: &pd_r, valid: &valid_r };
        let nbrp = PlaneBuffers { normal: &normal_n, plane_dist: &pd_n, valid: &valid_n };
        let rel = baseline_rel();
        let sel = geo_select(&refp, &nbrp, &intr(), &intr(), &rel, &OcclusionConfig::default());
        // Pixels warping outside the neighbor image are excluded; the rest pass.
        assert!(sel.entries.len() > W * H / 2);
        let r = geometric_consistency(&sel.entries, &refp, &nbrp, &intr(), &intr(), &rel, 1.0);
        assert!(r.loss < 1e-9, "loss = {}", r.loss);
        let inside = sel.mask.iter().filter(|&&m| m).count();
        assert_eq!(inside, sel.entries.len());
    }

    #[test]
    fn corrupted_neighbor_region_is_masked_out() {
        let (normal_r, pd_r, valid_r) = wall_buffers(&Vector3::zeros());
        let (normal_n, mut pd_n, valid_n) = wall_buffers(&Vector3::new(0.1, 0.0, 0.0));
        for y in 0..H {
            for x in 0..10 {
                pd_n.set(x, y, 0, -1.0);
            }
        }
        let refp = PlaneBuffers { normal: &normal_r, plane_dist: &pd_r, valid: &valid_r };
        let nbrp = PlaneBuffers { normal: &normal_n, plane_dist: &pd_n, valid: &valid_n };
        let rel = baseline_rel();
        let clean = {
            let (normal_n, pd_n, valid_n) = wall_buffers(&Vector3::new(0.1, 0.0, 0.0));
            let nbrp = PlaneBuffers { normal: &normal_n, plane_dist: &pd_n, valid: &valid_n };
            geo_select(&refp, &nbrp, &intr(), &intr(), &rel, &OcclusionConfig::default())
        };
        let sel = geo_select(&refp, &nbrp, &intr(), &intr(), &rel, &OcclusionConfig::default());
        assert!(sel.entries.len() < clean.entries.len());
        // Ref pixels landing in the corrupted band disappeared from the mask.
        let dropped = clean
            .entries
            .iter()
            .filter(|e| e.lx < 10 && !sel.mask[e.y * W + e.x])
            .count();
        assert!(dropped > 0);
    }

    #[test]
    fn geo_backward_matches_finite_differences() {
        let (mut normal_r, mut pd_r, valid_r) = wall_buffers(&Vector3::zeros());
        let (mut normal_n, mut pd_n, valid_n) = wall_buffers(&Vector3::new(0.1, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for buf in [&mut normal_r, &mut normal_n] {
            for v in buf.data.iter_mut() {
                *v += rng.gen_range(-0.03..0.03);
            }
        }
        for buf in [&mut pd_r, &mut pd_n] {
            for v in buf.data.iter_mut() {
                *v += rng.gen_range(-0.03..0.03);
            }
        }
        let rel = baseline_rel();
        // Wide threshold keeps every candidate in the set despite the noise.
        let occ = OcclusionConfig { pixel_threshold: 50.0 };
        let sel = {
            let refp = PlaneBuffers { normal: &normal_r, plane_dist: &pd_r, valid: &valid_r };
            let nbrp = PlaneBuffers { normal: &normal_n, plane_dist: &pd_n, valid: &valid_n };
            geo_select(&refp, &nbrp, &intr(), &intr(), &rel, &occ)
        };
        assert!(!sel.entries.is_empty());
        let d_loss = 0.8;
        let eval = |nr: &ImageBuffer, pr: &ImageBuffer, nn: &ImageBuffer, pn: &ImageBuffer| {
            let refp = PlaneBuffers { normal: nr, plane_dist: pr, valid: &valid_r };
            let nbrp = PlaneBuffers { normal: nn, plane_dist: pn, valid: &valid_n };
            geometric_consistency(&sel.entries, &refp, &nbrp, &intr(), &intr(), &rel, 1.0).loss
        };
        let r = {
            let refp = PlaneBuffers { normal: &normal_r, plane_dist: &pd_r, valid: &valid_r };
            let nbrp = PlaneBuffers { normal: &normal_n, plane_dist: &pd_n, valid: &valid_n };
            geometric_consistency(&sel.entries, &refp, &nbrp, &intr(), &intr(), &rel, d_loss)
        };
        let eps = 1e-6;
        for e in sel.entries.iter().take(5) {
            for c in 0..3 {
                let i = normal_r.idx(e.x, e.y, c);
                let orig = normal_r.data[i];
                normal_r.data[i] = orig + eps;
                let lp = eval(&normal_r, &pd_r, &normal_n, &pd_n);
                normal_r.data[i] = orig - eps;
                let lm = eval(&normal_r, &pd_r, &normal_n, &pd_n);
                normal_r.data[i] = orig;
                let fd = d_loss * (lp - lm) / (2.0 * eps);
                assert_relative_eq!(
                    r.d_ref.d_normal.data[i],
                    fd,
                    epsilon = 1e-10,
                    max_relative = 1e-4
                );
            }
            let i = pd_r.idx(e.x, e.y, 0);
            let orig = pd_r.data[i];
            pd_r.data[i] = orig + eps;
            let lp = eval(&normal_r, &pd_r, &normal_n, &pd_n);
            pd_r.data[i] = orig - eps;
            let lm = eval(&normal_r, &pd_r, &normal_n, &pd_n);
            pd_r.data[i] = orig;
            let fd = d_loss * (lp - lm) / (2.0 * eps);
            assert_relative_eq!(
                r.d_ref.d_plane_dist.data[i],
                fd,
                epsilon = 1e-10,
                max_relative = 1e-4
            );

            let i = pd_n.idx(e.lx, e.ly, 0);
            let orig = pd_n.data[i];
            pd_n.data[i] = orig + eps;
            let lp = eval(&normal_r, &pd_r, &normal_n, &pd_n);
            pd_n.data[i] = orig - eps;
            let lm = eval(&normal_r, &pd_r, &normal_n, &pd_n);
            pd_n.data[i] = orig;
            let fd = d_loss * (lp - lm) / (2.0 * eps);
            assert_relative_eq!(
                r.d_nbr.d_plane_dist.data[i],
                fd,
                epsilon = 1e-10,
                max_relative = 1e-4
            );
        }
    }

    #[test]
    fn neighbor_selection_orders_by_distance_and_direction() {
        let k = intr();
        let img = ImageBuffer::zeros(W, H, 3);
        let mk = |center: Vector3<f64>, flip: bool| {
            let rot = if flip {
                Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0)
            } else {
                Matrix3::identity()
            };
            View::new(0, k.clone(), CameraPose::new(rot, center), img.clone(), 0).unwrap()
        };
        let views = vec![
            mk(Vector3::zeros(), false),
            mk(Vector3::new(1.0, 0.0, 0.0), false),
            mk(Vector3::new(0.5, 0.0, 0.0), true),
            mk(Vector3::new(2.0, 0.0, 0.0), false),
            mk(Vector3::new(3.0, 0.0, 0.0), false),
        ];
        assert_eq!(select_neighbors(&views, 0, 2), vec![1, 3]);
        assert_eq!(select_neighbors(&views, 0, 10), vec![1, 3, 4]);
    }
}
