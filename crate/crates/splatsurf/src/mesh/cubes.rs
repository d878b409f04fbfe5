//! Marching-cubes case table, generated at startup.
//!
//! Corner `c` of the unit cube sits at `((c>>0)&1, (c>>1)&1, (c>>2)&1)`. A
//! case mask sets bit `c` when that corner is inside the surface (negative
//! value). Each case polygonizes into closed edge cycles found by pairing cut
//! edges face by face; ambiguous faces (two diagonal inside corners) pair the
//! cut edges around each inside corner, a face-local rule that both cubes
//! sharing the face apply identically, which keeps the extracted surface
//! watertight.

use std::sync::LazyLock;

use nalgebra::Vector3;

/// Cube edges as corner pairs; edge `e` runs along axis `e / 4` and its first
/// corner is the one with a 0 bit on that axis.
pub const EDGES: [(u8, u8); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

#[inline]
pub fn edge_axis(e: usize) -> usize {
    e / 4
}

pub fn corner_pos(c: u8) -> Vector3<f64> {
    Vector3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

fn is_cut(mask: u8, e: usize) -> bool {
    let (a, b) = EDGES[e];
    ((mask >> a) & 1) != ((mask >> b) & 1)
}

/// Edges lying entirely in the face `axis = side`.
fn face_edges(axis: usize, side: u8) -> Vec<usize> {
    (0..12)
        .filter(|&e| {
            let (a, b) = EDGES[e];
            (a >> axis) & 1 == side && (b >> axis) & 1 == side
        })
        .collect()
}

/// Pair up the cut edges of one face. A quad face has 0, 2, or 4 cut edges;
/// with 4 the inside corners are diagonal and each keeps its two incident cut
/// edges together.
fn face_pairs(mask: u8, axis: usize, side: u8) -> Vec<(usize, usize)> {
    let cut: Vec<usize> = face_edges(axis, side)
        .into_iter()
        .filter(|&e| is_cut(mask, e))
        .collect();
    match cut.len() {
        0 => Vec::new(),
        2 => vec![(cut[0], cut[1])],
        4 => {
            let inside: Vec<u8> = (0..8)
                .filter(|&c| (c >> axis) & 1 == side && (mask >> c) & 1 == 1)
                .collect();
            debug_assert_eq!(inside.len(), 2);
            inside
                .iter()
                .map(|&c| {
                    let touching: Vec<usize> = cut
                        .iter()
                        .copied()
                        .filter(|&e| EDGES[e].0 == c || EDGES[e].1 == c)
                        .collect();
                    (touching[0], touching[1])
                })
                .collect()
        }
        n => unreachable!("{} cut edges on a quad face", n),
    }
}

/// Closed cycles of cut edges for one case mask, unoriented.
fn cycles_for_mask(mask: u8) -> Vec<Vec<usize>> {
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3 {
        for side in 0..2u8 {
            for (a, b) in face_pairs(mask, axis, side) {
                partners[a].push(b);
                partners[b].push(a);
            }
        }
    }
    let mut seen = [false; 12];
    let mut cycles = Vec::new();
    for start in 0..12 {
        if partners[start].is_empty() || seen[start] {
            continue;
        }
        debug_assert_eq!(partners[start].len(), 2);
        let mut cyc = vec![start];
        seen[start] = true;
        let mut prev = start;
        let mut cur = partners[start][0];
        while cur != start {
            seen[cur] = true;
            cyc.push(cur);
            let nxt = if partners[cur][0] == prev {
                partners[cur][1]
            } else {
                partners[cur][0]
            };
            prev = cur;
            cur = nxt;
        }
        cycles.push(cyc);
    }
    cycles
}

/// Order the cycle so a fan triangulation winds counterclockwise seen from
/// outside (positive side).
fn orient(mask: u8, mut cyc: Vec<usize>) -> Vec<usize> {
    let pts: Vec<Vector3<f64>> = cyc
        .iter()
        .map(|&e| {
            let (a, b) = EDGES[e];
            (corner_pos(a) + corner_pos(b)) * 0.5
        })
        .collect();
    let mut normal = Vector3::zeros();
    for i in 0..pts.len() {
        let p = pts[i];
        let q = pts[(i + 1) % pts.len()];
        normal.x += (p.y - q.y) * (p.z + q.z);
        normal.y += (p.z - q.z) * (p.x + q.x);
        normal.z += (p.x - q.x) * (p.y + q.y);
    }
    // Outward reference: sum of inside-corner to outside-corner directions
    // over the cycle's edges.
    let mut outward = Vector3::zeros();
    for &e in &cyc {
        let (a, b) = EDGES[e];
        let dir = corner_pos(b) - corner_pos(a);
        outward += if (mask >> a) & 1 == 1 { dir } else { -dir };
    }
    if normal.dot(&outward) < 0.0 {
        cyc.reverse();
    }
    cyc
}

/// For every mask, triangles as triples of edge indices.
pub static TABLE: LazyLock<Vec<Vec<[u8; 3]>>> = LazyLock::new(|| {
    (0..256u16)
        .map(|m| {
            let mask = m as u8;
            let mut tris = Vec::new();
            for cyc in cycles_for_mask(mask) {
                let cyc = orient(mask, cyc);
                for i in 1..cyc.len() - 1 {
                    tris.push([cyc[0] as u8, cyc[i] as u8, cyc[i + 1] as u8]);
                }
            }
            tris
        })
        .collect()
});
