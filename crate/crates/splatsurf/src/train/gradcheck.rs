//! Finite-difference verification of the full training objective.
//!
//! A live evaluation fixes every discrete selection (valid masks, patch
//! grids, warp landing pixels); central differences then probe the smooth
//! remainder with the same selections replayed, so analytic gradients and
//! numeric quotients measure the same function.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::decoder::DecoderWeights;
use crate::field::{Anchor, AnchorGrid, LodConfig};
use crate::loss::appearance::AppearanceModel;
use crate::loss::local::LocalWeight;
use crate::loss::{LossWeights, OcclusionConfig, PatchConfig};
use crate::param::{derive_seed, Param};
use crate::render::RenderOptions;
use crate::scene::{CameraIntrinsics, CameraPose, ImageBuffer, View};

use super::objective::{evaluate, Evaluation, ObjectiveInputs, Selections};
use super::TrainError;

/// Relative errors are measured against `max(|analytic|, |numeric|,
/// REL_FLOOR)` so near-zero gradients are judged on absolute agreement.
pub const REL_FLOOR: f64 = 1e-2;

/// A self-contained scene small enough for exhaustive probing.
pub struct CheckScene {
    pub grid: AnchorGrid,
    pub decoder: DecoderWeights,
    pub appearance: AppearanceModel,
    pub views: Vec<View>,
    pub ref_view: usize,
    pub nbr_view: Option<usize>,
    pub weights: LossWeights,
    pub patch: PatchConfig,
    pub occlusion: OcclusionConfig,
    pub local_weight: LocalWeight,
    pub background: Vector3<f64>,
}

/// Parameter blocks the checker can probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    AnchorFeature,
    AnchorOffsets,
    AnchorLogscales,
    DecoderW1,
    DecoderB1,
    DecoderW2,
    DecoderB2,
    AppearanceEmb,
    AppearanceW1,
    AppearanceB1,
    AppearanceW2,
    AppearanceB2,
}

pub const ALL_GROUPS: [ParamGroup; 12] = [
    ParamGroup::AnchorFeature,
    ParamGroup::AnchorOffsets,
    ParamGroup::AnchorLogscales,
    ParamGroup::DecoderW1,
    ParamGroup::DecoderB1,
    ParamGroup::DecoderW2,
    ParamGroup::DecoderB2,
    ParamGroup::AppearanceEmb,
    ParamGroup::AppearanceW1,
    ParamGroup::AppearanceB1,
    ParamGroup::AppearanceW2,
    ParamGroup::AppearanceB2,
];

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::AnchorFeature => "anchor.feature",
            ParamGroup::AnchorOffsets => "anchor.offsets",
            ParamGroup::AnchorLogscales => "anchor.logscales",
            ParamGroup::DecoderW1 => "decoder.w1",
            ParamGroup::DecoderB1 => "decoder.b1",
            ParamGroup::DecoderW2 => "decoder.w2",
            ParamGroup::DecoderB2 => "decoder.b2",
            ParamGroup::AppearanceEmb => "appearance.emb",
            ParamGroup::AppearanceW1 => "appearance.w1",
            ParamGroup::AppearanceB1 => "appearance.b1",
            ParamGroup::AppearanceW2 => "appearance.w2",
            ParamGroup::AppearanceB2 => "appearance.b2",
        }
    }
}

/// Worst finite-difference disagreement within one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Flat coordinate of the worst disagreement.
    pub worst: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn print_lines(&self) {
        for g in &self.groups {
            println!(
                "{:<18} checked {:>4}  max rel {:.3e}  max abs {:.3e}  worst at {}",
                g.group.name(),
                g.checked,
                g.max_rel,
                g.max_abs,
                g.worst
            );
        }
    }
}

fn flat_len(scene: &CheckScene, group: ParamGroup) -> usize {
    let per_anchor = |f: fn(&Anchor) -> usize| -> usize {
        scene.grid.anchors().iter().map(f).sum()
    };
    match group {
        ParamGroup::AnchorFeature => per_anchor(|a| a.feature.len()),
        ParamGroup::AnchorOffsets => per_anchor(|a| a.offsets.len()),
        ParamGroup::AnchorLogscales => per_anchor(|a| a.logscales.len()),
        ParamGroup::DecoderW1 => scene.decoder.w1.len(),
        ParamGroup::DecoderB1 => scene.decoder.b1.len(),
        ParamGroup::DecoderW2 => scene.decoder.w2.len(),
        ParamGroup::DecoderB2 => scene.decoder.b2.len(),
        ParamGroup::AppearanceEmb => {
            scene.appearance.embeddings[scene.views[scene.ref_view].embedding_id].len()
        }
        ParamGroup::AppearanceW1 => scene.appearance.w1.len(),
        ParamGroup::AppearanceB1 => scene.appearance.b1.len(),
        ParamGroup::AppearanceW2 => scene.appearance.w2.len(),
        ParamGroup::AppearanceB2 => scene.appearance.b2.len(),
    }
}

/// Map a flat coordinate in an anchor-block group to (anchor, inner index).
fn anchor_coord(
    grid: &AnchorGrid,
    group: ParamGroup,
    idx: usize,
) -> (usize, usize) {
    let mut rest = idx;
    for (ai, a) in grid.anchors().iter().enumerate() {
        let len = match group {
            ParamGroup::AnchorFeature => a.feature.len(),
            ParamGroup::AnchorOffsets => a.offsets.len(),
            ParamGroup::AnchorLogscales => a.logscales.len(),
            _ => unreachable!(),
        };
        if rest < len {
            return (ai, rest);
        }
        rest -= len;
    }
    panic!("coordinate out of range");
}

fn param_mut(scene: &mut CheckScene, group: ParamGroup, idx: usize) -> &mut f64 {
    match group {
        ParamGroup::AnchorFeature | ParamGroup::AnchorOffsets | ParamGroup::AnchorLogscales => {
            let (ai, j) = anchor_coord(&scene.grid, group, idx);
            let a = &mut scene.grid.anchors_mut()[ai];
            match group {
                ParamGroup::AnchorFeature => &mut a.feature.val[j],
                ParamGroup::AnchorOffsets => &mut a.offsets.val[j],
                ParamGroup::AnchorLogscales => &mut a.logscales.val[j],
                _ => unreachable!(),
            }
        }
        ParamGroup::DecoderW1 => &mut scene.decoder.w1.val[idx],
        ParamGroup::DecoderB1 => &mut scene.decoder.b1.val[idx],
        ParamGroup::DecoderW2 => &mut scene.decoder.w2.val[idx],
        ParamGroup::DecoderB2 => &mut scene.decoder.b2.val[idx],
        ParamGroup::AppearanceEmb => {
            let e = scene.views[scene.ref_view].embedding_id;
            &mut scene.appearance.embeddings[e].val[idx]
        }
        ParamGroup::AppearanceW1 => &mut scene.appearance.w1.val[idx],
        ParamGroup::AppearanceB1 => &mut scene.appearance.b1.val[idx],
        ParamGroup::AppearanceW2 => &mut scene.appearance.w2.val[idx],
        ParamGroup::AppearanceB2 => &mut scene.appearance.b2.val[idx],
    }
}

fn analytic_grad(scene: &CheckScene, eval: &Evaluation, group: ParamGroup, idx: usize) -> f64 {
    match group {
        ParamGroup::AnchorFeature | ParamGroup::AnchorOffsets | ParamGroup::AnchorLogscales => {
            let (ai, j) = anchor_coord(&scene.grid, group, idx);
            // Active set is all anchors, in grid order.
            let g = &eval.grads.anchors[ai];
            match group {
                ParamGroup::AnchorFeature => g.feature[j],
                ParamGroup::AnchorOffsets => g.offsets[j],
                ParamGroup::AnchorLogscales => g.logscales[j],
                _ => unreachable!(),
            }
        }
        ParamGroup::DecoderW1 => eval.grads.decoder.w1[idx],
        ParamGroup::DecoderB1 => eval.grads.decoder.b1[idx],
        ParamGroup::DecoderW2 => eval.grads.decoder.w2[idx],
        ParamGroup::DecoderB2 => eval.grads.decoder.b2[idx],
        ParamGroup::AppearanceEmb => eval.grads.appearance.d_emb[idx],
        ParamGroup::AppearanceW1 => eval.grads.appearance.d_w1[idx],
        ParamGroup::AppearanceB1 => eval.grads.appearance.d_b1[idx],
        ParamGroup::AppearanceW2 => eval.grads.appearance.d_w2[idx],
        ParamGroup::AppearanceB2 => eval.grads.appearance.d_b2[idx],
    }
}

fn eval_scene(
    scene: &CheckScene,
    frozen: Option<&Selections>,
) -> Result<Evaluation, TrainError> {
    let active: Vec<usize> = (0..scene.grid.len()).collect();
    let opts = RenderOptions::smooth();
    let inp = ObjectiveInputs {
        grid: &scene.grid,
        active: &active,
        decoder: &scene.decoder,
        appearance: &scene.appearance,
        views: &scene.views,
        ref_view: scene.ref_view,
        nbr_view: scene.nbr_view,
        weights: &scene.weights,
        patch: &scene.patch,
        occlusion: &scene.occlusion,
        local_weight: scene.local_weight,
        opts: &opts,
        background: scene.background,
        iter: scene.weights.mv_start_iter,
    };
    evaluate(&inp, frozen)
}

/// Compare analytic gradients against central differences.
///
/// Checks every coordinate of groups no larger than `per_group`, otherwise a
/// seeded sample of `per_group` coordinates.
pub fn gradient_check(
    scene: &mut CheckScene,
    eps: f64,
    per_group: usize,
    seed: u64,
) -> Result<GradReport, TrainError> {
    let base = eval_scene(scene, None)?;
    let frozen = base.selections.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for group in ALL_GROUPS {
        let len = flat_len(scene, group);
        let coords: Vec<usize> = if len <= per_group {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < per_group {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        let mut report = GroupReport {
            group,
            checked: coords.len(),
            max_rel: 0.0,
            max_abs: 0.0,
            worst: 0,
        };
        for idx in coords {
            let a = analytic_grad(scene, &base, group, idx);
            let original = *param_mut(scene, group, idx);
            *param_mut(scene, group, idx) = original + eps;
            let plus = eval_scene(scene, Some(&frozen))?.total;
            *param_mut(scene, group, idx) = original - eps;
            let minus = eval_scene(scene, Some(&frozen))?.total;
            *param_mut(scene, group, idx) = original;
            let f = (plus - minus) / (2.0 * eps);
            let abs = (a - f).abs();
            let rel = abs / a.abs().max(f.abs()).max(REL_FLOOR);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = idx;
            }
            report.max_abs = report.max_abs.max(abs);
        }
        groups.push(report);
    }
    Ok(GradReport { groups })
}

fn smooth_texture(w: usize, h: usize, phase: f64) -> ImageBuffer {
    let mut img = ImageBuffer::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            img.set(x, y, 0, 0.5 + 0.3 * (5.0 * u + phase).sin() * (3.0 * v).cos());
            img.set(x, y, 1, 0.5 + 0.25 * (4.0 * v + 0.7 * phase).sin());
            img.set(x, y, 2, 0.5 + 0.2 * (6.0 * u + 2.0 * v + phase).cos());
        }
    }
    img
}

/// A seeded two-view scene with one anchor (four kernels) facing the
/// cameras, every loss term active, and textured ground-truth photos.
pub fn check_scene(seed: u64, img: usize) -> CheckScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc0de));
    let cfg = LodConfig {
        v0: 0.5,
        k: 2,
        levels: 1,
        d_max: 20.0,
    };
    let mut grid = AnchorGrid::new(cfg);
    let feature: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let offsets: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let logscales: Vec<f64> = (0..12)
        .map(|i| {
            if i % 3 == 2 {
                (0.01f64).ln() + rng.gen_range(-0.2..0.2)
            } else {
                (0.25f64).ln() + rng.gen_range(-0.3..0.3)
            }
        })
        .collect();
    grid.insert(Anchor {
        level: 0,
        cell: [0, 0, 4],
        center: Vector3::new(0.0, 0.0, 2.0),
        feature: Param::new(feature),
        offsets: Param::new(offsets),
        logscales: Param::new(logscales),
    });

    let mut decoder = DecoderWeights::init(16, 4, 16, derive_seed(seed, 0xdec0));
    for wv in decoder.w2.val.iter_mut() {
        *wv = rng.gen_range(-0.15..0.15);
    }
    for (i, bv) in decoder.b2.val.iter_mut().enumerate() {
        // Lift opacity logits so the blended alpha passes the depth gate.
        *bv = if i % 11 == 0 { 1.4 } else { rng.gen_range(-0.1..0.1) };
    }

    let mut appearance = AppearanceModel::new(2, 8, 12, 8, derive_seed(seed, 0xa99));
    for wv in appearance.w2.val.iter_mut() {
        *wv = rng.gen_range(-0.05..0.05);
    }
    for ev in appearance.embeddings.iter_mut() {
        for x in ev.val.iter_mut() {
            *x = rng.gen_range(-0.3..0.3);
        }
    }

    let c = (img as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(40.0, 40.0, c, c, img, img);
    let views = vec![
        View::new(
            0,
            k,
            CameraPose::identity(),
            smooth_texture(img, img, 0.3 + seed as f64 * 0.1),
            0,
        )
        .unwrap(),
        View::new(
            1,
            k,
            CameraPose::new(nalgebra::Matrix3::identity(), Vector3::new(0.12, 0.05, 0.0)),
            smooth_texture(img, img, 1.1 + seed as f64 * 0.1),
            1,
        )
        .unwrap(),
    ];

    CheckScene {
        grid,
        decoder,
        appearance,
        views,
        ref_view: 0,
        nbr_view: Some(1),
        weights: LossWeights::default(),
        patch: PatchConfig::default(),
        occlusion: OcclusionConfig::default(),
        local_weight: LocalWeight::PlanarDot,
        background: Vector3::new(0.35, 0.4, 0.45),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_term_is_active_in_the_check_scene() {
        // Guards the fixture: a dead term would make the matching FD checks
        // vacuous.
        let scene = check_scene(0, 32);
        let eval = eval_scene(&scene, None).unwrap();
        let c = &eval.components;
        assert!(c.appearance > 0.0, "appearance {}", c.appearance);
        assert!(c.flatten > 0.0, "flatten {}", c.flatten);
        assert!(c.local > 0.0, "local {}", c.local);
        assert!(c.ncc > 0.0, "ncc {}", c.ncc);
        assert!(c.geo > 0.0, "geo {}", c.geo);
        assert!(eval.total.is_finite());
        let sel = &eval.selections;
        assert!(sel.photo.as_ref().unwrap().len() > 0);
        assert!(sel.geo.as_ref().unwrap().len() > 0);
    }

    #[test]
    fn frozen_replay_reproduces_live_total() {
        let scene = check_scene(2, 32);
        let live = eval_scene(&scene, None).unwrap();
        let replay = eval_scene(&scene, Some(&live.selections)).unwrap();
        let diff = (live.total - replay.total).abs();
        assert!(
            diff <= 1e-12 * live.total.abs().max(1.0),
            "live {} replay {}",
            live.total,
            replay.total
        );
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in [0, 1] {
            let mut scene = check_scene(seed, 32);
            let report = gradient_check(&mut scene, 1e-4, 8, seed).unwrap();
            if report.max_rel() > 1e-3 {
                report.print_lines();
            }
            assert!(
                report.max_rel() <= 1e-3,
                "seed {} max rel {}",
                seed,
                report.max_rel()
            );
        }
    }

    #[test]
    fn gradients_match_without_a_neighbor_view() {
        let mut scene = check_scene(3, 32);
        scene.nbr_view = None;
        let eval = eval_scene(&scene, None).unwrap();
        assert!(eval.selections.photo.is_none());
        assert_eq!(eval.components.ncc, 0.0);
        let report = gradient_check(&mut scene, 1e-4, 6, 3).unwrap();
        assert!(report.max_rel() <= 1e-3, "max rel {}", report.max_rel());
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient_both_ways() {
        // Cutting the first embedding input out of the appearance MLP makes
        // the loss independent of that coordinate; analytic and numeric
        // gradients must both vanish.
        let mut scene = check_scene(4, 32);
        let in_dim = scene.appearance.e_dim + 1;
        for j in 0..scene.appearance.hidden {
            scene.appearance.w1.val[j * in_dim] = 0.0;
        }
        let base = eval_scene(&scene, None).unwrap();
        assert_eq!(base.grads.appearance.d_emb[0], 0.0);

        let frozen = base.selections.clone();
        let eps = 1e-4;
        let e = scene.views[scene.ref_view].embedding_id;
        let original = scene.appearance.embeddings[e].val[0];
        scene.appearance.embeddings[e].val[0] = original + eps;
        let plus = eval_scene(&scene, Some(&frozen)).unwrap().total;
        scene.appearance.embeddings[e].val[0] = original - eps;
        let minus = eval_scene(&scene, Some(&frozen)).unwrap().total;
        scene.appearance.embeddings[e].val[0] = original;
        assert_eq!(plus, minus);
    }

    #[test]
    fn step_sweep_has_an_interior_error_minimum() {
        // Truncation error shrinks with the step while cancellation noise
        // grows, so the best step is interior; in double precision the noise
        // wall sits near 1e-7, hence the wide bracket.
        let sweep = [1e-3, 1e-5, 1e-7];
        let mut errs = Vec::new();
        for &eps in &sweep {
            let mut scene = check_scene(0, 32);
            let report = gradient_check(&mut scene, eps, 6, 0).unwrap();
            let abs = report
                .groups
                .iter()
                .map(|g| g.max_abs)
                .fold(0.0, f64::max);
            errs.push(abs);
        }
        let argmin = errs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            argmin != 0 && argmin != sweep.len() - 1,
            "errors over {:?} were {:?}",
            sweep,
            errs
        );
    }
}
