//! Small per-anchor perceptron turning (feature, view direction, distance)
//! into the parameters of the anchor's kernels.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Anchor, FieldError, GaussianKernel};
use crate::param::Param;

/// Values decoded per kernel: opacity logit, 3 color logits, 4 quaternion
/// components (added to the identity bias), 3 log-scale corrections.
pub const OUT_PER_OFFSET: usize = 11;

/// Two-layer perceptron weights. Layout is row-major: `w1` is
/// `hidden × (f_dim + 4)`, `w2` is `(n_offsets · 11) × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub f_dim: usize,
    pub n_offsets: usize,
    pub hidden: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl DecoderWeights {
    pub fn in_dim(&self) -> usize {
        self.f_dim + 4
    }

    pub fn out_dim(&self) -> usize {
        self.n_offsets * OUT_PER_OFFSET
    }

    /// Fresh decoder: first layer seeded uniform in ±1/√in_dim, second layer
    /// zero so decoding starts at the identity (opacity 0.5, identity
    /// rotation, no scale correction).
    pub fn init(f_dim: usize, n_offsets: usize, hidden: usize, seed: u64) -> Self {
        let in_dim = f_dim + 4;
        let out_dim = n_offsets * OUT_PER_OFFSET;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w1: Vec<f64> = (0..hidden * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            f_dim,
            n_offsets,
            hidden,
            w1: Param::new(w1),
            b1: Param::zeros(hidden),
            w2: Param::zeros(out_dim * hidden),
            b2: Param::zeros(out_dim),
        }
    }
}

/// Gradients of some scalar loss with respect to one kernel's stored
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelGrad {
    pub mu: Vector3<f64>,
    pub rot: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color_logit: Vector3<f64>,
}

impl KernelGrad {
    pub fn zeros() -> Self {
        Self {
            mu: Vector3::zeros(),
            rot: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            color_logit: Vector3::zeros(),
        }
    }

    pub fn add(&mut self, other: &KernelGrad) {
        self.mu += other.mu;
        self.rot += other.rot;
        self.log_scale += other.log_scale;
        self.opacity_logit += other.opacity_logit;
        self.color_logit += other.color_logit;
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = self.opacity_logit.abs();
        for i in 0..3 {
            m = m.max(self.mu[i].abs());
            m = m.max(self.log_scale[i].abs());
            m = m.max(self.color_logit[i].abs());
        }
        for i in 0..4 {
            m = m.max(self.rot[i].abs());
        }
        m
    }
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeTape {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Gradients for every decoder weight block, same layouts as
/// [`DecoderWeights`].
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderGrads {
    pub fn zeros(w: &DecoderWeights) -> Self {
        Self {
            w1: vec![0.0; w.w1.len()],
            b1: vec![0.0; w.b1.len()],
            w2: vec![0.0; w.w2.len()],
            b2: vec![0.0; w.b2.len()],
        }
    }

    pub fn add(&mut self, other: &DecoderGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

fn decoder_input(
    anchor: &Anchor,
    cam_center: &Vector3<f64>,
    d_max: f64,
) -> Result<Vec<f64>, FieldError> {
    let mut input = Vec::with_capacity(anchor.feature.len() + 4);
    input.extend_from_slice(&anchor.feature.val);
    let to_anchor = anchor.center - cam_center;
    let dist = to_anchor.norm();
    let dir = if dist > 1e-12 {
        to_anchor / dist
    } else {
        Vector3::zeros()
    };
    input.extend_from_slice(&[dir.x, dir.y, dir.z, dist / d_max]);
    Ok(input)
}

/// Decode an anchor into its kernels for a given camera position.
///
/// Kernel `j` sits at `center + offset_j · v_level`; its rotation is the
/// normalized decoded quaternion with identity bias, its log-scale the
/// anchor's stored log-scale plus the decoded correction.
pub fn decode_anchor(
    anchor: &Anchor,
    weights: &DecoderWeights,
    cam_center: &Vector3<f64>,
    voxel_size: f64,
    d_max: f64,
) -> Result<(Vec<GaussianKernel>, DecodeTape), FieldError> {
    if anchor.feature.len() != weights.f_dim {
        return Err(FieldError::ShapeMismatch {
            what: format!(
                "feature dim {} vs decoder {}",
                anchor.feature.len(),
                weights.f_dim
            ),
        });
    }
    if anchor.n_offsets() != weights.n_offsets {
        return Err(FieldError::ShapeMismatch {
            what: format!(
                "offsets {} vs decoder {}",
                anchor.n_offsets(),
                weights.n_offsets
            ),
        });
    }
    let input = decoder_input(anchor, cam_center, d_max)?;
    let in_dim = weights.in_dim();
    let mut hidden = vec![0.0; weights.hidden];
    for r in 0..weights.hidden {
        let mut acc = weights.b1.val[r];
        let row = &weights.w1.val[r * in_dim..(r + 1) * in_dim];
        for (w, x) in row.iter().zip(&input) {
            acc += w * x;
        }
        hidden[r] = acc.tanh();
    }
    let out_dim = weights.out_dim();
    let mut out = vec![0.0; out_dim];
    for r in 0..out_dim {
        let mut acc = weights.b2.val[r];
        let row = &weights.w2.val[r * weights.hidden..(r + 1) * weights.hidden];
        for (w, h) in row.iter().zip(&hidden) {
            acc += w * h;
        }
        out[r] = acc;
    }
    let mut kernels = Vec::with_capacity(weights.n_offsets);
    for j in 0..weights.n_offsets {
        let o = &out[j * OUT_PER_OFFSET..(j + 1) * OUT_PER_OFFSET];
        kernels.push(GaussianKernel {
            mu: anchor.center + anchor.offset(j) * voxel_size,
            rot: Vector4::new(1.0 + o[4], o[5], o[6], o[7]),
            log_scale: anchor.logscale(j) + Vector3::new(o[8], o[9], o[10]),
            opacity_logit: o[0],
            color_logit: Vector3::new(o[1], o[2], o[3]),
        });
    }
    Ok((kernels, DecodeTape { input, hidden }))
}

/// Gradients of the decode with respect to the anchor's trainable blocks.
#[derive(Debug, Clone)]
pub struct AnchorGrads {
    pub feature: Vec<f64>,
    pub offsets: Vec<f64>,
    pub logscales: Vec<f64>,
}

/// Reverse pass of [`decode_anchor`]: folds per-kernel gradients back into
/// the anchor blocks and the decoder weights (accumulated into `dec_grads`).
pub fn decode_anchor_backward(
    weights: &DecoderWeights,
    voxel_size: f64,
    tape: &DecodeTape,
    kernel_grads: &[KernelGrad],
    dec_grads: &mut DecoderGrads,
) -> AnchorGrads {
    assert_eq!(kernel_grads.len(), weights.n_offsets);
    let out_dim = weights.out_dim();
    let mut d_out = vec![0.0; out_dim];
    let n = weights.n_offsets;
    let mut d_offsets = vec![0.0; 3 * n];
    let mut d_logscales = vec![0.0; 3 * n];
    for (j, g) in kernel_grads.iter().enumerate() {
        let o = j * OUT_PER_OFFSET;
        d_out[o] = g.opacity_logit;
        d_out[o + 1] = g.color_logit.x;
        d_out[o + 2] = g.color_logit.y;
        d_out[o + 3] = g.color_logit.z;
        d_out[o + 4] = g.rot[0];
        d_out[o + 5] = g.rot[1];
        d_out[o + 6] = g.rot[2];
        d_out[o + 7] = g.rot[3];
        d_out[o + 8] = g.log_scale.x;
        d_out[o + 9] = g.log_scale.y;
        d_out[o + 10] = g.log_scale.z;
        for c in 0..3 {
            d_offsets[3 * j + c] = g.mu[c] * voxel_size;
            d_logscales[3 * j + c] = g.log_scale[c];
        }
    }

    let hidden = weights.hidden;
    let mut d_hidden = vec![0.0; hidden];
    for r in 0..out_dim {
        let row = &weights.w2.val[r * hidden..(r + 1) * hidden];
        let g = d_out[r];
        if g == 0.0 {
            continue;
        }
        dec_grads.b2[r] += g;
        for c in 0..hidden {
            dec_grads.w2[r * hidden + c] += g * tape.hidden[c];
            d_hidden[c] += g * row[c];
        }
    }

    let in_dim = weights.in_dim();
    let mut d_feature = vec![0.0; weights.f_dim];
    for r in 0..hidden {
        let dh = d_hidden[r] * (1.0 - tape.hidden[r] * tape.hidden[r]);
        if dh == 0.0 {
            continue;
        }
        dec_grads.b1[r] += dh;
        let row = &weights.w1.val[r * in_dim..(r + 1) * in_dim];
        for c in 0..in_dim {
            dec_grads.w1[r * in_dim + c] += dh * tape.input[c];
            if c < weights.f_dim {
                d_feature[c] += dh * row[c];
            }
        }
    }

    AnchorGrads {
        feature: d_feature,
        offsets: d_offsets,
        logscales: d_logscales,
    }
}
