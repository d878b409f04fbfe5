//! Per-view appearance correction: a small perceptron turns a view embedding
//! plus a coarse luminance thumbnail into a positive per-pixel RGB multiplier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::ssim::{ssim_backward, ssim_mean};
use crate::loss::LossError;
use crate::param::Param;
use crate::scene::ImageBuffer;

pub const EMBED_DIM: usize = 16;
pub const APPEARANCE_HIDDEN: usize = 64;
pub const APPEARANCE_DOWNSAMPLE: usize = 16;

/// Trainable appearance state: one embedding per training view and the
/// multiplier perceptron. Zero-initialized output weights make the initial
/// multiplier exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub e_dim: usize,
    pub hidden: usize,
    pub downsample: usize,
    pub embeddings: Vec<Param>,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl AppearanceModel {
    pub fn new(n_views: usize, e_dim: usize, hidden: usize, downsample: usize, seed: u64) -> Self {
        assert!(downsample >= 1);
        let in_dim = e_dim + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w1: Vec<f64> = (0..hidden * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        AppearanceModel {
            e_dim,
            hidden,
            downsample,
            embeddings: (0..n_views).map(|_| Param::zeros(e_dim)).collect(),
            w1: Param::new(w1),
            b1: Param::zeros(hidden),
            w2: Param::zeros(3 * hidden),
            b2: Param::zeros(3),
        }
    }

    fn in_dim(&self) -> usize {
        self.e_dim + 1
    }
}

/// Intermediate state saved by [`apply_appearance`] for the backward pass.
#[derive(Debug)]
pub struct AppearanceTape {
    pub coarse_w: usize,
    pub coarse_h: usize,
    emb: Vec<f64>,
    luma_coarse: Vec<f64>,
    hidden: Vec<f64>,
    mult_coarse: Vec<f64>,
    mult_full: ImageBuffer,
}

/// Gradients for every trainable appearance block touched by one view.
#[derive(Debug, Clone)]
pub struct AppearanceGrads {
    pub d_emb: Vec<f64>,
    pub d_w1: Vec<f64>,
    pub d_b1: Vec<f64>,
    pub d_w2: Vec<f64>,
    pub d_b2: Vec<f64>,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn coarse_dims(w: usize, h: usize, ds: usize) -> (usize, usize) {
    (w.div_ceil(ds), h.div_ceil(ds))
}

fn block_range(b: usize, ds: usize, full: usize) -> std::ops::Range<usize> {
    b * ds..((b + 1) * ds).min(full)
}

fn downsample_mean(luma: &ImageBuffer, ds: usize) -> Vec<f64> {
    let (cw, ch) = coarse_dims(luma.width, luma.height, ds);
    let mut out = vec![0.0; cw * ch];
    for by in 0..ch {
        for bx in 0..cw {
            let xs = block_range(bx, ds, luma.width);
            let ys = block_range(by, ds, luma.height);
            let n = (xs.len() * ys.len()) as f64;
            let mut sum = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    sum += luma.get(x, y, 0);
                }
            }
            out[by * cw + bx] = sum / n;
        }
    }
    out
}

/// Bilinear sample weights of fine pixel `x` in the coarse grid, aligned so a
/// full block's center maps onto its cell.
fn coarse_weights(x: usize, ds: usize, cw: usize) -> (usize, usize, f64) {
    let u = (x as f64 - (ds as f64 - 1.0) / 2.0) / ds as f64;
    let uc = u.clamp(0.0, (cw - 1) as f64);
    let i0 = uc.floor() as usize;
    let i1 = (i0 + 1).min(cw - 1);
    (i0, i1, uc - i0 as f64)
}

/// Multiplies the render by the model's positive per-pixel correction.
/// Returns the adjusted image and the tape for [`apply_appearance_backward`].
pub fn apply_appearance(
    model: &AppearanceModel,
    image: &ImageBuffer,
    view_index: usize,
) -> Result<(ImageBuffer, AppearanceTape), LossError> {
    let emb = model
        .embeddings
        .get(view_index)
        .ok_or(LossError::UnknownView(view_index))?;
    if image.channels != 3 {
        return Err(LossError::DimensionMismatch(format!(
            "appearance expects RGB, got {} channels",
            image.channels
        )));
    }
    let ds = model.downsample;
    let (w, h) = (image.width, image.height);
    let (cw, ch) = coarse_dims(w, h, ds);
    let luma = image.to_luma();
    let luma_coarse = downsample_mean(&luma, ds);

    let in_dim = model.in_dim();
    let mut hidden = vec![0.0; cw * ch * model.hidden];
    let mut mult_coarse = vec![0.0; cw * ch * 3];
    let mut input = vec![0.0; in_dim];
    input[..model.e_dim].copy_from_slice(&emb.val);
    for cell in 0..cw * ch {
        input[model.e_dim] = luma_coarse[cell];
        let h_slice = &mut hidden[cell * model.hidden..(cell + 1) * model.hidden];
        for (j, hj) in h_slice.iter_mut().enumerate() {
            let mut acc = model.b1.val[j];
            for (i, &x) in input.iter().enumerate() {
                acc += model.w1.val[j * in_dim + i] * x;
            }
            *hj = acc.tanh();
        }
        for c in 0..3 {
            let mut acc = model.b2.val[c];
            for (j, &hj) in h_slice.iter().enumerate() {
                acc += model.w2.val[c * model.hidden + j] * hj;
            }
            mult_coarse[cell * 3 + c] = acc.exp();
        }
    }

    let mut mult_full = ImageBuffer::zeros(w, h, 3);
    for y in 0..h {
        let (j0, j1, fy) = coarse_weights(y, ds, ch);
        for x in 0..w {
            let (i0, i1, fx) = coarse_weights(x, ds, cw);
            for c in 0..3 {
                let v00 = mult_coarse[(j0 * cw + i0) * 3 + c];
                let v10 = mult_coarse[(j0 * cw + i1) * 3 + c];
                let v01 = mult_coarse[(j1 * cw + i0) * 3 + c];
                let v11 = mult_coarse[(j1 * cw + i1) * 3 + c];
                let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10)
                    + fy * ((1.0 - fx) * v01 + fx * v11);
                mult_full.set(x, y, c, v);
            }
        }
    }

    let mut adjusted = ImageBuffer::zeros(w, h, 3);
    for i in 0..adjusted.data.len() {
        adjusted.data[i] = mult_full.data[i] * image.data[i];
    }
    Ok((
        adjusted,
        AppearanceTape {
            coarse_w: cw,
            coarse_h: ch,
            emb: emb.val.clone(),
            luma_coarse,
            hidden,
            mult_coarse,
            mult_full,
        },
    ))
}

/// Backward pass of [`apply_appearance`]: routes `d_adjusted` into the input
/// image and every trainable block.
pub fn apply_appearance_backward(
    model: &AppearanceModel,
    image: &ImageBuffer,
    tape: &AppearanceTape,
    d_adjusted: &ImageBuffer,
) -> (ImageBuffer, AppearanceGrads) {
    let ds = model.downsample;
    let (w, h) = (image.width, image.height);
    let (cw, ch) = (tape.coarse_w, tape.coarse_h);
    let mut d_image = ImageBuffer::zeros(w, h, 3);
    let mut d_mult_coarse = vec![0.0; cw * ch * 3];

    for y in 0..h {
        let (j0, j1, fy) = coarse_weights(y, ds, ch);
        for x in 0..w {
            let (i0, i1, fx) = coarse_weights(x, ds, cw);
            for c in 0..3 {
                let idx = d_image.idx(x, y, c);
                let up = d_adjusted.data[idx];
                d_image.data[idx] += up * tape.mult_full.data[idx];
                let d_mult = up * image.data[idx];
                d_mult_coarse[(j0 * cw + i0) * 3 + c] += d_mult * (1.0 - fy) * (1.0 - fx);
                d_mult_coarse[(j0 * cw + i1) * 3 + c] += d_mult * (1.0 - fy) * fx;
                d_mult_coarse[(j1 * cw + i0) * 3 + c] += d_mult * fy * (1.0 - fx);
                d_mult_coarse[(j1 * cw + i1) * 3 + c] += d_mult * fy * fx;
            }
        }
    }

    let in_dim = model.in_dim();
    let mut grads = AppearanceGrads {
        d_emb: vec![0.0; model.e_dim],
        d_w1: vec![0.0; model.w1.len()],
        d_b1: vec![0.0; model.b1.len()],
        d_w2: vec![0.0; model.w2.len()],
        d_b2: vec![0.0; model.b2.len()],
    };
    let mut d_luma_coarse = vec![0.0; cw * ch];
    for cell in 0..cw * ch {
        let h_slice = &tape.hidden[cell * model.hidden..(cell + 1) * model.hidden];
        let mut d_h = vec![0.0; model.hidden];
        for c in 0..3 {
            let d_out = d_mult_coarse[cell * 3 + c] * tape.mult_coarse[cell * 3 + c];
            grads.d_b2[c] += d_out;
            for (j, &hj) in h_slice.iter().enumerate() {
                grads.d_w2[c * model.hidden + j] += d_out * hj;
                d_h[j] += model.w2.val[c * model.hidden + j] * d_out;
            }
        }
        for j in 0..model.hidden {
            let d_pre = d_h[j] * (1.0 - h_slice[j] * h_slice[j]);
            grads.d_b1[j] += d_pre;
            for i in 0..model.e_dim {
                grads.d_w1[j * in_dim + i] += d_pre * tape.emb[i];
                grads.d_emb[i] += model.w1.val[j * in_dim + i] * d_pre;
            }
            grads.d_w1[j * in_dim + model.e_dim] += d_pre * tape.luma_coarse[cell];
            d_luma_coarse[cell] += model.w1.val[j * in_dim + model.e_dim] * d_pre;
        }
    }

    for by in 0..ch {
        for bx in 0..cw {
            let xs = block_range(bx, ds, w);
            let ys = block_range(by, ds, h);
            let inv_n = 1.0 / (xs.len() * ys.len()) as f64;
            let d_luma = d_luma_coarse[by * cw + bx] * inv_n;
            for y in ys.clone() {
                for x in xs.clone() {
                    for c in 0..3 {
                        d_image.add(x, y, c, d_luma * LUMA[c]);
                    }
                }
            }
        }
    }
    (d_image, grads)
}

/// Photometric fit: mean absolute error of the adjusted image against ground
/// truth plus a weighted DSSIM term.
pub struct AppearanceLoss {
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub d_adjusted: ImageBuffer,
    pub d_render: ImageBuffer,
}

pub fn appearance_loss(
    render: &ImageBuffer,
    adjusted: &ImageBuffer,
    truth: &ImageBuffer,
    lambda: f64,
    dssim_on_adjusted: bool,
    d_loss: f64,
) -> Result<AppearanceLoss, LossError> {
    let dims = (render.width, render.height, render.channels);
    if dims != (adjusted.width, adjusted.height, adjusted.channels)
        || dims != (truth.width, truth.height, truth.channels)
    {
        return Err(LossError::DimensionMismatch(
            "render/adjusted/truth shapes differ".into(),
        ));
    }
    let n = adjusted.data.len() as f64;
    let mut l1 = 0.0;
    let mut d_adjusted = ImageBuffer::zeros(render.width, render.height, render.channels);
    for i in 0..adjusted.data.len() {
        let diff = adjusted.data[i] - truth.data[i];
        l1 += diff.abs() / n;
        d_adjusted.data[i] = d_loss * diff.signum() / n;
    }
    let ssim_arg = if dssim_on_adjusted { adjusted } else { render };
    let ssim = ssim_mean(ssim_arg, truth);
    let dssim = (1.0 - ssim) / 2.0;
    let (d_arg, _) = ssim_backward(ssim_arg, truth, d_loss * (-lambda / 2.0));
    let mut d_render = ImageBuffer::zeros(render.width, render.height, render.channels);
    if dssim_on_adjusted {
        for i in 0..d_adjusted.data.len() {
            d_adjusted.data[i] += d_arg.data[i];
        }
    } else {
        d_render = d_arg;
    }
    Ok(AppearanceLoss { loss: l1 + lambda * dssim, l1, dssim, d_adjusted, d_render })
}
