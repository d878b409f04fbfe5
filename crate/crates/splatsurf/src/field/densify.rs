//! Growth and pruning of the anchor grid from training statistics.

use nalgebra::Vector3;

use super::{Anchor, AnchorGrid};
use crate::param::Param;

/// Per-anchor aggregates collected between densification events. Indices are
/// parallel to the grid's anchor order, which is stable within an interval.
#[derive(Debug, Clone)]
pub struct DensifyStats {
    grad_sum: Vec<f64>,
    grad_count: Vec<u64>,
    weighted_pos: Vec<Vector3<f64>>,
    weight_sum: Vec<f64>,
    max_opacity: Vec<f64>,
    seen: Vec<bool>,
}

impl DensifyStats {
    pub fn new(n_anchors: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n_anchors],
            grad_count: vec![0; n_anchors],
            weighted_pos: vec![Vector3::zeros(); n_anchors],
            weight_sum: vec![0.0; n_anchors],
            max_opacity: vec![0.0; n_anchors],
            seen: vec![false; n_anchors],
        }
    }

    /// Record one decoded kernel of `anchor_idx`: its positional gradient
    /// magnitude, world position, and decoded opacity.
    pub fn record_kernel(&mut self, anchor_idx: usize, grad_mag: f64, mu: Vector3<f64>, opacity: f64) {
        self.grad_sum[anchor_idx] += grad_mag;
        self.grad_count[anchor_idx] += 1;
        self.weighted_pos[anchor_idx] += mu * grad_mag;
        self.weight_sum[anchor_idx] += grad_mag;
        if opacity > self.max_opacity[anchor_idx] {
            self.max_opacity[anchor_idx] = opacity;
        }
        self.seen[anchor_idx] = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyThresholds {
    /// Mean positional-gradient magnitude above which an anchor spawns a
    /// finer child.
    pub tau_grow: f64,
    /// Anchors whose best decoded opacity stays below this are dropped.
    pub tau_prune: f64,
}

impl Default for DensifyThresholds {
    fn default() -> Self {
        Self {
            tau_grow: 64.0 * 1.6e-4,
            tau_prune: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyOutcome {
    pub grown: usize,
    pub pruned: usize,
}

/// Apply one growth/prune step.
///
/// Anchors with mean positional gradient above `tau_grow` spawn a child one
/// level finer at the gradient-weighted position's cell (if that slot is
/// free and a finer level exists). Anchors that were rendered during the
/// interval but never reached `tau_prune` opacity are removed. Both passes
/// preserve the grid's canonical ordering and dedup invariant.
pub fn densify_and_prune(
    grid: &mut AnchorGrid,
    stats: &DensifyStats,
    thresholds: &DensifyThresholds,
) -> DensifyOutcome {
    assert_eq!(stats.grad_sum.len(), grid.len(), "stats out of sync with grid");
    let cfg = grid.cfg;

    // Children first: computed against the pre-prune indices.
    let mut children: Vec<Anchor> = Vec::new();
    for (i, a) in grid.anchors().iter().enumerate() {
        if a.level + 1 >= cfg.levels || stats.grad_count[i] == 0 {
            continue;
        }
        let mean_grad = stats.grad_sum[i] / stats.grad_count[i] as f64;
        if mean_grad <= thresholds.tau_grow || stats.weight_sum[i] <= 0.0 {
            continue;
        }
        let target = stats.weighted_pos[i] / stats.weight_sum[i];
        let level = a.level + 1;
        let v = cfg.voxel_size(level);
        let cell = [
            (target.x / v).round() as i64,
            (target.y / v).round() as i64,
            (target.z / v).round() as i64,
        ];
        let center = Vector3::new(v * cell[0] as f64, v * cell[1] as f64, v * cell[2] as f64);
        children.push(Anchor {
            level,
            cell,
            center,
            feature: Param::new(a.feature.val.clone()),
            offsets: Param::new(a.offsets.val.clone()),
            logscales: Param::new(vec![(v * 0.3).ln(); a.logscales.len()]),
        });
    }

    let prune: Vec<(u32, [i64; 3])> = grid
        .anchors()
        .iter()
        .enumerate()
        .filter(|(i, _)| stats.seen[*i] && stats.max_opacity[*i] < thresholds.tau_prune)
        .map(|(_, a)| (a.level, a.cell))
        .collect();
    let pruned = prune.len();
    if pruned > 0 {
        grid.retain(|a| !prune.contains(&(a.level, a.cell)));
    }

    let mut grown = 0;
    for child in children {
        if grid.insert(child) {
            grown += 1;
        }
    }
    DensifyOutcome { grown, pruned }
}
