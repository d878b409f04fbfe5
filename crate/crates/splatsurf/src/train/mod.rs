//! Per-partition optimization, parallel orchestration over partitions, and a
//! finite-difference verification harness for the full objective.

pub mod gradcheck;
pub mod objective;

use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::decoder::{decode_anchor, DecoderWeights};
use crate::field::densify::{densify_and_prune, DensifyStats, DensifyThresholds};
use crate::field::{
    active_anchors, AnchorGrid, FieldError, LevelMode, FEATURE_DIM, OFFSETS_PER_ANCHOR,
};
use crate::loss::appearance::{
    AppearanceModel, APPEARANCE_DOWNSAMPLE, APPEARANCE_HIDDEN, EMBED_DIM,
};
use crate::loss::local::LocalWeight;
use crate::loss::multiview::select_neighbors;
use crate::loss::{LossComponents, LossError, LossWeights, OcclusionConfig, PatchConfig};
use crate::param::{derive_seed, AdamConfig};
use crate::partition::{merge_partitions, Partition, PartitionError, PartitionLayout};
use crate::render::{render, RenderBuffers, RenderOptions};
use crate::scene::View;
use objective::{evaluate, ObjectiveInputs};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hidden width of the per-partition kernel decoder.
pub const DECODER_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no active anchors for view {view}")]
    NothingVisible { view: usize },
    #[error("partition {cell} has no training cameras")]
    NoTrainingViews { cell: usize },
    #[error(
        "non-finite loss at iteration {iteration} \
         (appearance {appearance:.6e}, flatten {flatten:.6e}, local {local:.6e}, \
         ncc {ncc:.6e}, geo {geo:.6e})"
    )]
    NonFiniteLoss {
        iteration: u64,
        appearance: f64,
        flatten: f64,
        local: f64,
        ncc: f64,
        geo: f64,
    },
    #[error("partition {cell} failed")]
    Partition {
        cell: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Merge(#[from] PartitionError),
}

/// Per-parameter-group step sizes. `positions` follows an exponential decay
/// schedule; it is reserved (kernel centers derive from the fixed anchor
/// grid) but kept so configs stay stable if centers ever become trainable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub positions: f64,
    pub positions_end: f64,
    pub features: f64,
    pub offsets: f64,
    pub logscales: f64,
    pub decoder: f64,
    pub embeddings: f64,
    pub phi: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1.6e-4,
            positions_end: 1.6e-6,
            features: 2.5e-3,
            offsets: 1e-2,
            logscales: 5e-3,
            decoder: 2e-3,
            embeddings: 1e-3,
            phi: 1e-3,
        }
    }
}

impl LearningRates {
    /// Exponential interpolation from `positions` to `positions_end` over the
    /// run.
    pub fn positions_at(&self, iter: u64, total: u64) -> f64 {
        if total == 0 {
            return self.positions;
        }
        let t = iter as f64 / total as f64;
        self.positions * (self.positions_end / self.positions).powf(t)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: LearningRates,
    pub densify_interval: u64,
    /// Densification stops after this fraction of the run.
    pub densify_stop_frac: f64,
    pub densify: DensifyThresholds,
    /// Multi-view terms switch on after this fraction of the run.
    pub mv_start_frac: f64,
    /// Neighbor cohort size for the multi-view terms.
    pub neighbors: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub patch: PatchConfig,
    pub occlusion: OcclusionConfig,
    pub local_weight: LocalWeight,
    pub background: [f64; 3],
    /// Progress line period on stdout; 0 silences.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRates::default(),
            densify_interval: 100,
            densify_stop_frac: 0.6,
            densify: DensifyThresholds::default(),
            mv_start_frac: 0.3,
            neighbors: 4,
            seed: 0,
            loss: LossWeights::default(),
            patch: PatchConfig::default(),
            occlusion: OcclusionConfig::default(),
            local_weight: LocalWeight::PlanarDot,
            background: [0.0, 0.0, 0.0],
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be positive".into());
        }
        let rates = [
            self.lr.positions,
            self.lr.positions_end,
            self.lr.features,
            self.lr.offsets,
            self.lr.logscales,
            self.lr.decoder,
            self.lr.embeddings,
            self.lr.phi,
        ];
        if rates.iter().any(|r| *r <= 0.0 || !r.is_finite()) {
            return Err("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.densify_stop_frac) {
            return Err("densify_stop_frac must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.mv_start_frac) {
            return Err("mv_start_frac must be in [0, 1]".into());
        }
        Ok(())
    }

    fn effective_weights(&self) -> LossWeights {
        LossWeights {
            mv_start_iter: (self.mv_start_frac * self.iterations as f64).round() as u64,
            ..self.loss
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub appearance: f64,
    pub flatten: f64,
    pub local: f64,
    pub ncc: f64,
    pub geo: f64,
    pub total: f64,
}

/// Append-only CSV of the loss curve.
pub fn write_loss_csv<W: Write>(records: &[LossRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "iteration,appearance,flatten,local,ncc,geo,total")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.appearance, r.flatten, r.local, r.ncc, r.geo, r.total
        )?;
    }
    Ok(())
}

/// Everything a partition training run produces.
#[derive(Debug, Clone)]
pub struct TrainedPartition {
    pub partition: Partition,
    pub grid: AnchorGrid,
    pub decoder: DecoderWeights,
    pub appearance: AppearanceModel,
    pub log: Vec<LossRecord>,
}

/// Merged result of all partitions: the union of core anchors, each tagged
/// with the partition whose decoder trained it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub layout: PartitionLayout,
    pub grid: AnchorGrid,
    /// Per-anchor source partition, indexing `decoders`/`appearance`.
    pub source: Vec<u32>,
    pub decoders: Vec<DecoderWeights>,
    pub appearance: Vec<AppearanceModel>,
}

impl MergedModel {
    /// Render a view from the merged field, decoding each anchor with its
    /// source partition's decoder.
    pub fn render_view(
        &self,
        view: &View,
        background: &Vector3<f64>,
        opts: &RenderOptions,
    ) -> Result<RenderBuffers, TrainError> {
        let kernels = self.decode_for_view(view)?;
        Ok(render(&kernels, view, background, opts))
    }

    /// Decode every anchor active for the view.
    pub fn decode_for_view(
        &self,
        view: &View,
    ) -> Result<Vec<crate::field::GaussianKernel>, TrainError> {
        let active = active_anchors(&self.grid, view, LevelMode::Round);
        let cam = view.pose.center();
        let mut kernels = Vec::new();
        for ai in active {
            let a = &self.grid.anchors()[ai];
            let dec = &self.decoders[self.source[ai] as usize];
            let v = self.grid.cfg.voxel_size(a.level);
            let (ks, _) = decode_anchor(a, dec, &cam, v, self.grid.cfg.d_max)?;
            kernels.extend(ks);
        }
        Ok(kernels)
    }
}

/// Optimize one partition's sub-grid against its training cameras.
///
/// Deterministic for a fixed seed: the view sequence, neighbor rotation and
/// densification schedule depend only on the config and the partition cell.
pub fn train_partition(
    p: &Partition,
    all_views: &[View],
    grid: &AnchorGrid,
    cfg: &TrainConfig,
) -> Result<TrainedPartition, TrainError> {
    if p.train_cameras.is_empty() {
        return Err(TrainError::NoTrainingViews { cell: p.cell });
    }
    let anchors: Vec<_> = p
        .core_anchors
        .iter()
        .chain(&p.expanded_anchors)
        .map(|&i| grid.anchors()[i].clone())
        .collect();
    let mut sub = AnchorGrid::from_anchors(grid.cfg, anchors);

    // Local copies of the training views; embeddings index the local order.
    let views: Vec<View> = p
        .train_cameras
        .iter()
        .enumerate()
        .map(|(local, &vi)| {
            let v = &all_views[vi];
            View::new(v.id, v.intrinsics, v.pose.clone(), v.image.clone(), local)
                .expect("training view")
        })
        .collect();

    let cell_salt = p.cell as u64;
    let mut decoder = DecoderWeights::init(
        FEATURE_DIM,
        OFFSETS_PER_ANCHOR,
        DECODER_HIDDEN,
        derive_seed(cfg.seed, 0x0de0 + cell_salt),
    );
    let mut appearance = AppearanceModel::new(
        views.len(),
        EMBED_DIM,
        APPEARANCE_HIDDEN,
        APPEARANCE_DOWNSAMPLE,
        derive_seed(cfg.seed, 0x0a00 + cell_salt),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5a00 + cell_salt));

    let weights = cfg.effective_weights();
    let opts = RenderOptions::default();
    let background = Vector3::new(cfg.background[0], cfg.background[1], cfg.background[2]);
    let adam = AdamConfig::default();
    let densify_stop = (cfg.densify_stop_frac * cfg.iterations as f64) as u64;
    let mut stats = DensifyStats::new(sub.len());
    let mut log = Vec::with_capacity(cfg.iterations as usize);

    for it in 0..cfg.iterations {
        let ref_local = rng.gen_range(0..views.len());
        let nbr_local = if LossComponents::mv_active(&weights, it) && views.len() > 1 {
            let cohort = select_neighbors(&views, ref_local, cfg.neighbors);
            if cohort.is_empty() {
                None
            } else {
                Some(cohort[it as usize % cohort.len()])
            }
        } else {
            None
        };
        let active = active_anchors(&sub, &views[ref_local], LevelMode::Round);
        if active.is_empty() {
            continue;
        }
        let inp = ObjectiveInputs {
            grid: &sub,
            active: &active,
            decoder: &decoder,
            appearance: &appearance,
            views: &views,
            ref_view: ref_local,
            nbr_view: nbr_local,
            weights: &weights,
            patch: &cfg.patch,
            occlusion: &cfg.occlusion,
            local_weight: cfg.local_weight,
            opts: &opts,
            background,
            iter: it,
        };
        let eval = evaluate(&inp, None)?;
        if !eval.total.is_finite() {
            let c = eval.components;
            return Err(TrainError::NonFiniteLoss {
                iteration: it,
                appearance: c.appearance,
                flatten: c.flatten,
                local: c.local,
                ncc: c.ncc,
                geo: c.geo,
            });
        }

        let step = it + 1;
        for (slot, &ai) in active.iter().enumerate() {
            let g = &eval.grads.anchors[slot];
            let a = &mut sub.anchors_mut()[ai];
            a.feature.adam_step(&g.feature, cfg.lr.features, &adam, step);
            a.offsets.adam_step(&g.offsets, cfg.lr.offsets, &adam, step);
            a.logscales.adam_step(&g.logscales, cfg.lr.logscales, &adam, step);
        }
        let dg = &eval.grads.decoder;
        decoder.w1.adam_step(&dg.w1, cfg.lr.decoder, &adam, step);
        decoder.b1.adam_step(&dg.b1, cfg.lr.decoder, &adam, step);
        decoder.w2.adam_step(&dg.w2, cfg.lr.decoder, &adam, step);
        decoder.b2.adam_step(&dg.b2, cfg.lr.decoder, &adam, step);
        let ag = &eval.grads.appearance;
        appearance.embeddings[ref_local].adam_step(&ag.d_emb, cfg.lr.embeddings, &adam, step);
        appearance.w1.adam_step(&ag.d_w1, cfg.lr.phi, &adam, step);
        appearance.b1.adam_step(&ag.d_b1, cfg.lr.phi, &adam, step);
        appearance.w2.adam_step(&ag.d_w2, cfg.lr.phi, &adam, step);
        appearance.b2.adam_step(&ag.d_b2, cfg.lr.phi, &adam, step);

        for ks in &eval.grads.kernel_stats {
            stats.record_kernel(active[ks.anchor_slot], ks.grad_mag, ks.mu, ks.opacity);
        }
        if cfg.densify_interval > 0
            && (it + 1) % cfg.densify_interval == 0
            && it + 1 <= densify_stop
        {
            densify_and_prune(&mut sub, &stats, &cfg.densify);
            stats = DensifyStats::new(sub.len());
        }

        let c = eval.components;
        log.push(LossRecord {
            iteration: it,
            appearance: c.appearance,
            flatten: c.flatten,
            local: c.local,
            ncc: c.ncc,
            geo: c.geo,
            total: eval.total,
        });
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            println!(
                "partition {} iter {} total {:.6} kernels {}",
                p.cell,
                it + 1,
                eval.total,
                sub.len() * OFFSETS_PER_ANCHOR
            );
        }
    }

    Ok(TrainedPartition {
        partition: p.clone(),
        grid: sub,
        decoder,
        appearance,
        log,
    })
}

/// Train every partition independently and merge. The result depends only on
/// the config and partition plan, not on `workers`.
pub fn train_all(
    partitions: &[Partition],
    views: &[View],
    grid: &AnchorGrid,
    layout: &PartitionLayout,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(MergedModel, Vec<TrainedPartition>), TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    let results: Vec<Result<TrainedPartition, TrainError>> = pool.install(|| {
        partitions
            .par_iter()
            .map(|p| {
                train_partition(p, views, grid, cfg).map_err(|e| TrainError::Partition {
                    cell: p.cell,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let mut trained = Vec::with_capacity(results.len());
    for r in results {
        trained.push(r?);
    }
    let pairs: Vec<_> = trained
        .iter()
        .map(|t| (t.partition.clone(), t.grid.clone()))
        .collect();
    let merged = merge_partitions(&pairs, layout)?;
    let model = MergedModel {
        layout: layout.clone(),
        grid: merged.grid,
        source: merged.source,
        decoders: trained.iter().map(|t| t.decoder.clone()).collect(),
        appearance: trained.iter().map(|t| t.appearance.clone()).collect(),
    };
    Ok((model, trained))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{build_hierarchy, LodConfig};
    use crate::partition::{plan_partitions, split_cameras, PartitionConfig};
    use crate::synth::{synth_scene, SynthConfig, BACKGROUND};

    fn tiny() -> (Vec<View>, AnchorGrid) {
        let scfg = SynthConfig {
            train_views: 4,
            test_views: 1,
            width: 24,
            height: 24,
            n_points: 400,
            seed: 11,
        };
        let scene = synth_scene(&scfg);
        let pts: Vec<_> = scene.points.iter().map(|p| p.pos).collect();
        let lod = LodConfig { v0: 1.6, k: 2, levels: 2, d_max: 16.0 };
        let grid = build_hierarchy(&pts, &lod, FEATURE_DIM, OFFSETS_PER_ANCHOR, 5).unwrap();
        (scene.train, grid)
    }

    fn part_cfg(gx: usize) -> PartitionConfig {
        PartitionConfig { gx, gz: 1, ..Default::default() }
    }

    fn quick_cfg(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            background: BACKGROUND,
            ..Default::default()
        }
    }

    #[test]
    fn validate_rejects_broken_configs() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr.decoder = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.mv_start_frac = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn position_schedule_spans_its_endpoints() {
        let lr = LearningRates::default();
        assert_eq!(lr.positions_at(0, 100), lr.positions);
        let end = lr.positions_at(100, 100);
        assert!((end - lr.positions_end).abs() < 1e-12);
        let mid = lr.positions_at(50, 100);
        assert!(mid < lr.positions && mid > lr.positions_end);
    }

    #[test]
    fn loss_csv_has_header_and_one_row_per_record() {
        let records = vec![
            LossRecord {
                iteration: 0,
                appearance: 0.5,
                flatten: 0.1,
                local: 0.2,
                ncc: 0.0,
                geo: 0.0,
                total: 0.8,
            },
            LossRecord {
                iteration: 1,
                appearance: 0.4,
                flatten: 0.1,
                local: 0.2,
                ncc: 0.05,
                geo: 0.01,
                total: 0.76,
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iteration,appearance,flatten,local,ncc,geo,total");
        assert!(lines[2].starts_with("1,"));
        assert_eq!(lines[1].split(',').count(), 7);
    }

    #[test]
    fn zero_iterations_returns_the_initial_state() {
        let (views, grid) = tiny();
        let parts = plan_partitions(&views, &grid, &part_cfg(1)).unwrap();
        let mut cfg = quick_cfg(1);
        cfg.iterations = 0;
        let t = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        assert!(t.log.is_empty());
        let expect_decoder = DecoderWeights::init(
            FEATURE_DIM,
            OFFSETS_PER_ANCHOR,
            DECODER_HIDDEN,
            derive_seed(cfg.seed, 0x0de0 + parts[0].cell as u64),
        );
        assert_eq!(t.decoder, expect_decoder);
        for (ti, &gi) in parts[0]
            .core_anchors
            .iter()
            .chain(&parts[0].expanded_anchors)
            .enumerate()
        {
            assert_eq!(t.grid.anchors()[ti], grid.anchors()[gi]);
        }
    }

    #[test]
    fn fixed_seed_training_is_reproducible() {
        let (views, grid) = tiny();
        let parts = plan_partitions(&views, &grid, &part_cfg(1)).unwrap();
        let cfg = quick_cfg(25);
        let a = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        let b = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.appearance, b.appearance);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_reduces_the_smoothed_loss() {
        let (views, grid) = tiny();
        let parts = plan_partitions(&views, &grid, &part_cfg(1)).unwrap();
        let cfg = quick_cfg(150);
        let t = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        assert_eq!(t.log.len(), 150);
        let window = |r: &[LossRecord]| -> f64 {
            r.iter().map(|l| l.appearance).sum::<f64>() / r.len() as f64
        };
        let head = window(&t.log[..25]);
        let tail = window(&t.log[125..]);
        assert!(
            tail < head,
            "appearance loss went from {:.5} to {:.5}",
            head,
            tail
        );
    }

    fn mean_min_scale(t: &TrainedPartition, views: &[View]) -> f64 {
        let cam = views[t.partition.train_cameras[0]].pose.center();
        let mut sum = 0.0;
        let mut n = 0usize;
        for a in t.grid.anchors() {
            let v = t.grid.cfg.voxel_size(a.level);
            let (ks, _) = decode_anchor(a, &t.decoder, &cam, v, t.grid.cfg.d_max).unwrap();
            for k in ks {
                sum += k.log_scale.min().exp();
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn doubling_the_flatten_weight_shrinks_minimum_scales() {
        let (views, grid) = tiny();
        let parts = plan_partitions(&views, &grid, &part_cfg(1)).unwrap();
        let mut cfg = quick_cfg(200);
        cfg.densify_interval = 0;
        let base = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        cfg.loss.w_flatten *= 2.0;
        let heavy = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        let (ms_base, ms_heavy) = (
            mean_min_scale(&base, &views),
            mean_min_scale(&heavy, &views),
        );
        assert!(
            ms_heavy < ms_base,
            "mean min scale {:.6} -> {:.6}",
            ms_base,
            ms_heavy
        );
    }

    #[test]
    fn one_partition_train_all_matches_a_direct_run() {
        let (views, grid) = tiny();
        let pcfg = part_cfg(1);
        let layout = split_cameras(&views, &pcfg).unwrap();
        let parts = plan_partitions(&views, &grid, &pcfg).unwrap();
        assert_eq!(parts.len(), 1);
        let cfg = quick_cfg(30);
        let direct = train_partition(&parts[0], &views, &grid, &cfg).unwrap();
        let (model, trained) = train_all(&parts, &views, &grid, &layout, &cfg, 1).unwrap();
        assert_eq!(trained.len(), 1);
        assert_eq!(model.grid, direct.grid);
        assert_eq!(model.decoders[0], direct.decoder);
        assert!(model.source.iter().all(|&s| s == 0));
    }

    #[test]
    fn worker_count_does_not_change_the_merged_model() {
        let (views, grid) = tiny();
        let pcfg = part_cfg(2);
        let layout = split_cameras(&views, &pcfg).unwrap();
        let parts = plan_partitions(&views, &grid, &pcfg).unwrap();
        assert_eq!(parts.len(), 2);
        let cfg = quick_cfg(40);
        let (m1, _) = train_all(&parts, &views, &grid, &layout, &cfg, 1).unwrap();
        let (m2, _) = train_all(&parts, &views, &grid, &layout, &cfg, 2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn a_failing_partition_is_identified_by_cell() {
        let (views, grid) = tiny();
        let pcfg = part_cfg(2);
        let layout = split_cameras(&views, &pcfg).unwrap();
        let mut parts = plan_partitions(&views, &grid, &pcfg).unwrap();
        parts[1].train_cameras.clear();
        let bad_cell = parts[1].cell;
        let err = train_all(&parts, &views, &grid, &layout, &quick_cfg(5), 2).unwrap_err();
        match err {
            TrainError::Partition { cell, source } => {
                assert_eq!(cell, bad_cell);
                assert!(matches!(*source, TrainError::NoTrainingViews { .. }));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn merged_model_renders_the_scene() {
        let (views, grid) = tiny();
        let pcfg = part_cfg(2);
        let layout = split_cameras(&views, &pcfg).unwrap();
        let parts = plan_partitions(&views, &grid, &pcfg).unwrap();
        let cfg = quick_cfg(30);
        let (model, _) = train_all(&parts, &views, &grid, &layout, &cfg, 2).unwrap();
        let bg = Vector3::new(BACKGROUND[0], BACKGROUND[1], BACKGROUND[2]);
        let buf = model
            .render_view(&views[0], &bg, &RenderOptions::default())
            .unwrap();
        assert_eq!(buf.color.width, 24);
        let mean_alpha =
            buf.alpha.data.iter().sum::<f64>() / buf.alpha.data.len() as f64;
        assert!(mean_alpha > 0.05, "mean alpha {}", mean_alpha);
    }
}
