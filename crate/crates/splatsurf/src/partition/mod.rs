//! Scene partitioning: quantile camera splits over the ground plane,
//! projection-based training-camera selection, floor-rule anchor expansion,
//! and the post-training merge.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::field::{active_anchors, Anchor, AnchorGrid, LevelMode};
use crate::scene::{project_point, View};

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("need at least {need} cameras for the grid, found {have}")]
    TooFewCameras { have: usize, need: usize },
    #[error("anchor (level {level}, cell {cell:?}) claimed by partitions {a} and {b}")]
    OverlapDetected { level: u32, cell: [i64; 3], a: usize, b: usize },
}

/// Planner knobs: grid shape, up axis, painter visibility constants.
#[derive(Debug, Clone, Copy)]
pub struct PartitionConfig {
    pub gx: usize,
    pub gz: usize,
    /// World axis treated as "up"; partitioning happens over the other two.
    pub up_axis: usize,
    /// Minimum unoccluded core anchors for a camera to join a partition.
    pub tau_vis: usize,
    /// Anchor is occluded when at least this many nearer anchors crowd it.
    pub rho: usize,
    /// Pixel radius of the painter crowding test.
    pub radius_px: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { gx: 4, gz: 2, up_axis: 1, tau_vis: 1, rho: 8, radius_px: 2.0 }
    }
}

/// Quantile cell boundaries over the two ground axes.
///
/// The first ground axis is cut into `gx` strips of (near-)equal camera
/// count; each strip is cut independently into `gz` cells. Cells are
/// half-open, lower-inclusive; the outermost edges absorb their boundary so
/// the cells exactly tile the camera bounding rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLayout {
    pub gx: usize,
    pub gz: usize,
    pub up_axis: usize,
    /// `gx + 1` boundaries along the first ground axis.
    pub a_bounds: Vec<f64>,
    /// Per strip, `gz + 1` boundaries along the second ground axis.
    pub b_bounds: Vec<Vec<f64>>,
}

/// The two non-up components of a world point, in ascending axis order.
pub fn ground_coords(x: &Vector3<f64>, up_axis: usize) -> (f64, f64) {
    match up_axis {
        0 => (x.y, x.z),
        1 => (x.x, x.z),
        _ => (x.x, x.y),
    }
}

fn quantile_bounds(sorted: &[f64], parts: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut bounds = Vec::with_capacity(parts + 1);
    bounds.push(sorted[0]);
    let base = n / parts;
    let extra = n % parts;
    let mut idx = 0usize;
    for p in 0..parts - 1 {
        idx += base + usize::from(p < extra);
        bounds.push(sorted[idx]);
    }
    bounds.push(sorted[n - 1]);
    bounds
}

fn cell_index(bounds: &[f64], v: f64) -> usize {
    let cells = bounds.len() - 1;
    let mut idx = 0;
    for i in 0..cells {
        if v >= bounds[i] {
            idx = i;
        }
    }
    idx
}

impl PartitionLayout {
    /// Flat cell id of a world point.
    pub fn cell_of(&self, x: &Vector3<f64>) -> usize {
        let (a, b) = ground_coords(x, self.up_axis);
        let i = cell_index(&self.a_bounds, a);
        let j = cell_index(&self.b_bounds[i], b);
        i * self.gz + j
    }

    pub fn n_cells(&self) -> usize {
        self.gx * self.gz
    }

    /// Ground-plane rectangle of a cell: ((a0, a1), (b0, b1)).
    pub fn cell_bounds(&self, cell: usize) -> ((f64, f64), (f64, f64)) {
        let i = cell / self.gz;
        let j = cell % self.gz;
        (
            (self.a_bounds[i], self.a_bounds[i + 1]),
            (self.b_bounds[i][j], self.b_bounds[i][j + 1]),
        )
    }
}

/// Splits cameras into a `gx × gz` grid of equal-count cells.
pub fn split_cameras(
    views: &[View],
    cfg: &PartitionConfig,
) -> Result<PartitionLayout, PartitionError> {
    let need = cfg.gx * cfg.gz;
    if views.len() < need {
        return Err(PartitionError::TooFewCameras { have: views.len(), need });
    }
    let grounds: Vec<(f64, f64)> = views
        .iter()
        .map(|v| ground_coords(&v.pose.center(), cfg.up_axis))
        .collect();
    let mut a_sorted: Vec<f64> = grounds.iter().map(|g| g.0).collect();
    a_sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let a_bounds = quantile_bounds(&a_sorted, cfg.gx);

    let b_all_min = grounds.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    let b_all_max = grounds.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let mut b_bounds = Vec::with_capacity(cfg.gx);
    for i in 0..cfg.gx {
        let mut strip: Vec<f64> = grounds
            .iter()
            .filter(|g| cell_index(&a_bounds, g.0) == i)
            .map(|g| g.1)
            .collect();
        strip.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut bounds = if strip.len() >= cfg.gz {
            quantile_bounds(&strip, cfg.gz)
        } else {
            // Degenerate strip (duplicated coordinates): fall back to even
            // splits of the global range.
            (0..=cfg.gz)
                .map(|j| b_all_min + (b_all_max - b_all_min) * j as f64 / cfg.gz as f64)
                .collect()
        };
        // Strips tile the full bounding rectangle along the second axis.
        bounds[0] = b_all_min;
        bounds[cfg.gz] = b_all_max;
        b_bounds.push(bounds);
    }
    Ok(PartitionLayout {
        gx: cfg.gx,
        gz: cfg.gz,
        up_axis: cfg.up_axis,
        a_bounds,
        b_bounds,
    })
}

/// One cell's working set: cameras to train with, anchors it owns, and
/// anchors borrowed from other cells for rendering completeness.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub cell: usize,
    pub bounds: ((f64, f64), (f64, f64)),
    pub train_cameras: Vec<usize>,
    pub core_anchors: Vec<usize>,
    pub expanded_anchors: Vec<usize>,
}

/// Assigns every anchor to exactly one cell by its center's ground position.
pub fn assign_core_anchors(layout: &PartitionLayout, grid: &AnchorGrid) -> Vec<Partition> {
    let mut parts: Vec<Partition> = (0..layout.n_cells())
        .map(|cell| Partition {
            cell,
            bounds: layout.cell_bounds(cell),
            train_cameras: Vec::new(),
            core_anchors: Vec::new(),
            expanded_anchors: Vec::new(),
        })
        .collect();
    for (i, a) in grid.anchors().iter().enumerate() {
        parts[layout.cell_of(&a.center)].core_anchors.push(i);
    }
    parts
}

/// Number of core anchors a view sees after the painter crowding test: an
/// anchor is discounted when `rho` or more strictly nearer anchors project
/// within `radius_px` of it.
pub fn count_visible_anchors(
    view: &View,
    centers: &[Vector3<f64>],
    cfg: &PartitionConfig,
) -> usize {
    let mut projected: Vec<(f64, f64, f64)> = Vec::new();
    for c in centers {
        if let Ok((p, z)) = project_point(&view.intrinsics, &view.pose, c) {
            if view.intrinsics.contains(p) {
                projected.push((z, p.u, p.v));
            }
        }
    }
    let r2 = cfg.radius_px * cfg.radius_px;
    let mut visible = 0;
    for (i, &(zi, ui, vi)) in projected.iter().enumerate() {
        let mut crowding = 0;
        for (j, &(zj, uj, vj)) in projected.iter().enumerate() {
            if i == j || zj >= zi {
                continue;
            }
            let du = uj - ui;
            let dv = vj - vi;
            if du * du + dv * dv <= r2 {
                crowding += 1;
                if crowding >= cfg.rho {
                    break;
                }
            }
        }
        if crowding < cfg.rho {
            visible += 1;
        }
    }
    visible
}

/// Fills `train_cameras`: a view qualifies when it sees at least `tau_vis`
/// unoccluded core anchors.
pub fn select_training_cameras(
    p: &mut Partition,
    views: &[View],
    grid: &AnchorGrid,
    cfg: &PartitionConfig,
) {
    let centers: Vec<Vector3<f64>> =
        p.core_anchors.iter().map(|&i| grid.anchors()[i].center).collect();
    p.train_cameras = views
        .iter()
        .enumerate()
        .filter(|(_, v)| count_visible_anchors(v, &centers, cfg) >= cfg.tau_vis)
        .map(|(i, _)| i)
        .collect();
}

/// Adds out-of-cell anchors that any training camera would activate under
/// the conservative floor-mode level rule.
pub fn expand_partition(p: &mut Partition, views: &[View], grid: &AnchorGrid) {
    let mut in_core = vec![false; grid.len()];
    for &i in &p.core_anchors {
        in_core[i] = true;
    }
    let mut chosen = vec![false; grid.len()];
    for &vi in &p.train_cameras {
        for i in active_anchors(grid, &views[vi], LevelMode::Floor) {
            if !in_core[i] {
                chosen[i] = true;
            }
        }
    }
    p.expanded_anchors = chosen
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| i)
        .collect();
}

/// Full plan: split, core assignment, camera selection, expansion.
pub fn plan_partitions(
    views: &[View],
    grid: &AnchorGrid,
    cfg: &PartitionConfig,
) -> Result<Vec<Partition>, PartitionError> {
    let layout = split_cameras(views, cfg)?;
    let mut parts = assign_core_anchors(&layout, grid);
    for p in parts.iter_mut() {
        select_training_cameras(p, views, grid, cfg);
        expand_partition(p, views, grid);
    }
    Ok(parts)
}

/// Merged model: one canonical grid plus, per anchor, the partition whose
/// decoder trained it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedGrid {
    pub grid: AnchorGrid,
    /// Source partition of each anchor, aligned with `grid.anchors`.
    pub source: Vec<u32>,
}

/// Keeps each partition's in-bounds (core) anchors with their trained
/// parameters and drops everything expanded. Anchors grown during training
/// are claimed by the partition whose bounds contain them.
pub fn merge_partitions(
    trained: &[(Partition, AnchorGrid)],
    layout: &PartitionLayout,
) -> Result<MergedGrid, PartitionError> {
    assert!(!trained.is_empty(), "nothing to merge");
    let mut owner: BTreeMap<(u32, [i64; 3]), usize> = BTreeMap::new();
    let mut kept: Vec<(Anchor, u32)> = Vec::new();
    for (p, grid) in trained {
        for a in grid.anchors() {
            if layout.cell_of(&a.center) != p.cell {
                continue;
            }
            let key = (a.level, a.cell);
            if let Some(&prev) = owner.get(&key) {
                return Err(PartitionError::OverlapDetected {
                    level: a.level,
                    cell: a.cell,
                    a: prev,
                    b: p.cell,
                });
            }
            owner.insert(key, p.cell);
            kept.push((a.clone(), p.cell as u32));
        }
    }
    kept.sort_by(|x, y| (x.0.level, x.0.cell).cmp(&(y.0.level, y.0.cell)));
    let source: Vec<u32> = kept.iter().map(|(_, s)| *s).collect();
    let anchors: Vec<Anchor> = kept.into_iter().map(|(a, _)| a).collect();
    let cfg = trained[0].1.cfg;
    Ok(MergedGrid { grid: AnchorGrid::from_anchors(cfg, anchors), source })
}
