//! Depth-map fusion into a truncated signed distance volume and triangle
//! extraction.

pub mod cubes;
pub mod ply;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{project_point, CameraIntrinsics, CameraPose, ImageBuffer};
use cubes::{corner_pos, edge_axis, EDGES, TABLE};

/// New observations saturate at this many fused samples per voxel.
pub const WEIGHT_CAP: f64 = 64.0;
/// Truncation band half-width, in voxels.
pub const TRUNC_VOXELS: f64 = 4.0;
/// Fraction of the bounding diagonal added as padding on every side.
pub const PAD_FRAC: f64 = 0.05;
/// Default number of voxels across the bounding diagonal.
pub const CELLS_ACROSS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("no points to bound the fusion volume")]
    EmptyVolume,
    #[error("voxel size must be positive and finite, got {0}")]
    BadVoxel(f64),
    #[error("depth {got}x{goth} does not match camera {want}x{wanth}")]
    DimensionMismatch {
        got: usize,
        goth: usize,
        want: usize,
        wanth: usize,
    },
    #[error("depth buffer must have one channel, got {0}")]
    NotScalar(usize),
    #[error("mask length {got}, expected {want}")]
    BadMask { got: usize, want: usize },
}

/// Axis-aligned truncated signed distance volume. Voxel `(i, j, k)` is
/// centered at `origin + voxel · (i, j, k)`; distances are stored in
/// truncation units, negative behind the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel: f64, dims: [usize; 3]) -> Result<Self, MeshError> {
        if !(voxel > 0.0) || !voxel.is_finite() {
            return Err(MeshError::BadVoxel(voxel));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel,
            dims,
            truncation: TRUNC_VOXELS * voxel,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel
    }
}

/// Volume covering the padded bounding box of `points`, sized so the
/// unpadded diagonal spans `cells_across` voxels.
pub fn volume_for_points(
    points: &[Vector3<f64>],
    cells_across: usize,
) -> Result<TsdfVolume, MeshError> {
    let first = points.first().ok_or(MeshError::EmptyVolume)?;
    let mut lo = *first;
    let mut hi = *first;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let diag = (hi - lo).norm();
    if diag <= 0.0 {
        return Err(MeshError::EmptyVolume);
    }
    let voxel = diag / cells_across.max(1) as f64;
    let pad = PAD_FRAC * diag;
    let origin = lo - Vector3::repeat(pad);
    let extent = (hi - lo) + Vector3::repeat(2.0 * pad);
    let dims = [
        (extent.x / voxel).ceil() as usize + 1,
        (extent.y / voxel).ceil() as usize + 1,
        (extent.z / voxel).ceil() as usize + 1,
    ];
    TsdfVolume::new(origin, voxel, dims)
}

/// Fuse one depth map. Each voxel projects to its nearest pixel; masked-out
/// pixels contribute nothing, observations more than one truncation band
/// behind the surface leave the voxel untouched, and closer ones average in
/// with the running weight, capped at [`WEIGHT_CAP`].
pub fn integrate_depth(
    vol: &mut TsdfVolume,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    depth: &ImageBuffer,
    mask: &[bool],
) -> Result<(), MeshError> {
    if depth.width != k.width || depth.height != k.height {
        return Err(MeshError::DimensionMismatch {
            got: depth.width,
            goth: depth.height,
            want: k.width,
            wanth: k.height,
        });
    }
    if depth.channels != 1 {
        return Err(MeshError::NotScalar(depth.channels));
    }
    if mask.len() != k.width * k.height {
        return Err(MeshError::BadMask {
            got: mask.len(),
            want: k.width * k.height,
        });
    }
    let [nx, ny, _] = vol.dims;
    let slab = nx * ny;
    let origin = vol.origin;
    let voxel = vol.voxel;
    let trunc = vol.truncation;
    vol.tsdf
        .par_chunks_mut(slab)
        .zip(vol.weight.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(kz, (tsdf, weight))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vector3::new(i as f64, j as f64, kz as f64) * voxel;
                    let Ok((px, z)) = project_point(k, pose, &p) else {
                        continue;
                    };
                    let u = px.u.round();
                    let v = px.v.round();
                    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                        continue;
                    }
                    let (x, y) = (u as usize, v as usize);
                    if !mask[y * k.width + x] {
                        continue;
                    }
                    let sdf = depth.get(x, y, 0) - z;
                    if sdf <= -trunc {
                        continue;
                    }
                    let s = (sdf / trunc).min(1.0);
                    let at = j * nx + i;
                    let w = weight[at];
                    tsdf[at] = (w * tsdf[at] + s) / (w + 1.0);
                    weight[at] = (w + 1.0).min(WEIGHT_CAP);
                }
            }
        });
    Ok(())
}

/// Debugging dump: text header (dims, origin, voxel size) followed by the
/// raw tsdf then weight values, little-endian doubles.
pub fn write_volume_dump<W: std::io::Write>(
    vol: &TsdfVolume,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "tsdf {} {} {}", vol.dims[0], vol.dims[1], vol.dims[2])?;
    writeln!(out, "origin {} {} {}", vol.origin.x, vol.origin.y, vol.origin.z)?;
    writeln!(out, "voxel {}", vol.voxel)?;
    for v in vol.tsdf.iter().chain(&vol.weight) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// An indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                );
                (b - a).cross(&(c - a)).norm() * 0.5
            })
            .sum()
    }

    /// Unnormalized outward normal of one triangle.
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        (b - a).cross(&(c - a))
    }
}

/// Run marching cubes over every cell whose eight corners all reached
/// `min_weight`. Vertices on shared cell edges are welded; zero-area
/// triangles are dropped. A volume with no observed crossings yields an
/// empty mesh.
pub fn extract_mesh(vol: &TsdfVolume, min_weight: f64) -> Mesh {
    let [nx, ny, nz] = vol.dims;
    let mut mesh = Mesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut edge_vertex: HashMap<(usize, usize, usize, u8), u32> = HashMap::new();
    let corner_offsets: [(usize, usize, usize); 8] = std::array::from_fn(|c| {
        let p = corner_pos(c as u8);
        (p.x as usize, p.y as usize, p.z as usize)
    });
    for kz in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut mask = 0u8;
                let mut vals = [0.0f64; 8];
                let mut gated = false;
                for c in 0..8 {
                    let (dx, dy, dz) = corner_offsets[c];
                    let at = vol.idx(i + dx, j + dy, kz + dz);
                    if vol.weight[at] < min_weight {
                        gated = true;
                        break;
                    }
                    vals[c] = vol.tsdf[at];
                    if vals[c] < 0.0 {
                        mask |= 1 << c;
                    }
                }
                if gated || mask == 0 || mask == 255 {
                    continue;
                }
                let tris = &TABLE[mask as usize];
                let mut cell_verts = [u32::MAX; 12];
                for tri in tris {
                    for &e in tri {
                        if cell_verts[e as usize] != u32::MAX {
                            continue;
                        }
                        let (a, b) = EDGES[e as usize];
                        let (ax, ay, az) = corner_offsets[a as usize];
                        let key = (i + ax, j + ay, kz + az, edge_axis(e as usize) as u8);
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let va = vals[a as usize];
                            let vb = vals[b as usize];
                            let t = va / (va - vb);
                            let pa = vol.voxel_center(key.0, key.1, key.2);
                            let mut pb = pa;
                            pb[edge_axis(e as usize)] += vol.voxel;
                            mesh.vertices.push(pa + (pb - pa) * t);
                            (mesh.vertices.len() - 1) as u32
                        });
                        cell_verts[e as usize] = id;
                    }
                    let ids = [
                        cell_verts[tri[0] as usize],
                        cell_verts[tri[1] as usize],
                        cell_verts[tri[2] as usize],
                    ];
                    if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                        continue;
                    }
                    let (a, b, c) = (
                        mesh.vertices[ids[0] as usize],
                        mesh.vertices[ids[1] as usize],
                        mesh.vertices[ids[2] as usize],
                    );
                    if (b - a).cross(&(c - a)).norm_squared() == 0.0 {
                        continue;
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    mesh
}
