//! Deterministic, non-learned signal rearrangements.
//!
//! Tensors here are channel-major `[c, h, w]`; a "block" of
//! `space_to_depth` folds each `block x block` spatial tile into the
//! channel axis with ordering `(c, block_row, block_col)`, the block
//! column varying fastest. Both reshuffles are pure permutations, so they
//! are exact, invertible and trivially differentiable.
//!
//! The Haar pyramid performs three analysis steps with the orthonormal
//! 2x2 kernels; odd dimensions are edge-replicated by one before a
//! halving. Only LH/HL/HH enter any loss, LL exists to feed the next
//! scale.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Folds spatial `block x block` tiles into channels:
/// `[c, h, w] -> [c*block^2, h/block, w/block]`.
pub fn space_to_depth(x: &Tensor<f32>, block: usize) -> Result<Tensor<f32>> {
    s2d_forward(x, block)
}

/// Exact inverse of [`space_to_depth`]:
/// `[c*block^2, h, w] -> [c, h*block, w*block]`.
pub fn depth_to_space(x: &Tensor<f32>, block: usize) -> Result<Tensor<f32>> {
    d2s_forward(x, block)
}

pub(crate) fn s2d_shape(shape: &[usize], block: usize) -> Result<[usize; 3]> {
    let [c, h, w]: [usize; 3] = shape
        .try_into()
        .map_err(|_| Error::shape("space_to_depth", format!("expected rank 3, got {shape:?}")))?;
    if block == 0 {
        return Err(Error::invalid("space_to_depth block must be positive"));
    }
    if h % block != 0 || w % block != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("spatial dims {h}x{w} not divisible by block {block}"),
        ));
    }
    Ok([c * block * block, h / block, w / block])
}

pub(crate) fn s2d_forward<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [co, ho, wo] = s2d_shape(x.shape(), block)?;
    let (c, _h, w) = x.dims3()?;
    let xd = x.data();
    let mut out = vec![T::ZERO; co * ho * wo];
    for oc in 0..co {
        let bc = oc % block;
        let br = (oc / block) % block;
        let ic = oc / (block * block);
        let _ = c;
        for oy in 0..ho {
            let iy = oy * block + br;
            for ox in 0..wo {
                let ix = ox * block + bc;
                out[(oc * ho + oy) * wo + ox] = xd[(ic * (ho * block) + iy) * w + ix];
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out)
}

pub(crate) fn d2s_shape(shape: &[usize], block: usize) -> Result<[usize; 3]> {
    let [c, h, w]: [usize; 3] = shape
        .try_into()
        .map_err(|_| Error::shape("depth_to_space", format!("expected rank 3, got {shape:?}")))?;
    if block == 0 {
        return Err(Error::invalid("depth_to_space block must be positive"));
    }
    if c % (block * block) != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("channel count {c} not divisible by block^2 = {}", block * block),
        ));
    }
    Ok([c / (block * block), h * block, w * block])
}

pub(crate) fn d2s_forward<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [co, ho, wo] = d2s_shape(x.shape(), block)?;
    let (_c, h, w) = x.dims3()?;
    let xd = x.data();
    let mut out = vec![T::ZERO; co * ho * wo];
    for oc in 0..co {
        for br in 0..block {
            for bc in 0..block {
                let ic = (oc * block + br) * block + bc;
                for iy in 0..h {
                    for ix in 0..w {
                        out[(oc * ho + iy * block + br) * wo + ix * block + bc] =
                            xd[(ic * h + iy) * w + ix];
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out)
}

/// Detail coefficients of one analysis scale; grids are `ceil(half)` the
/// previous scale per axis. Coefficients are kept in `f64` so exactness
/// properties (energy conservation, linearity) hold to full precision.
#[derive(Debug, Clone)]
pub struct WaveletScale {
    pub ll: Tensor<f64>,
    pub lh: Tensor<f64>,
    pub hl: Tensor<f64>,
    pub hh: Tensor<f64>,
}

/// Three-scale Haar analysis of a single 2D image.
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub scales: Vec<WaveletScale>,
}

pub const PYRAMID_SCALES: usize = 3;

/// Decomposes a rank-2 image of at least 8x8 into three Haar scales.
///
/// Per 2x2 block with `a, b` on the top row and `c, d` below:
/// `LL=(a+b+c+d)/2`, `LH=(a-b+c-d)/2`, `HL=(a+b-c-d)/2`,
/// `HH=(a-b-c+d)/2` — an orthonormal basis, so scale-1 energy is
/// conserved on even-sized inputs.
pub fn haar_pyramid(img: &Tensor<f32>) -> Result<WaveletPyramid> {
    let (h, w) = img.dims2()?;
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!(
            "haar_pyramid needs at least 8x8 for three scales, got {h}x{w}"
        )));
    }
    let mut scales = Vec::with_capacity(PYRAMID_SCALES);
    let wide: Tensor<f64> = img.cast();
    let mut cur = Tensor::new(vec![1, h, w], wide.into_data())?;
    for _ in 0..PYRAMID_SCALES {
        let packed = haar_scale_forward(&cur)?;
        let (_, h2, w2) = packed.dims3()?;
        let band = |s: usize| -> Result<Tensor<f64>> {
            Tensor::new(vec![h2, w2], packed.data()[s * h2 * w2..(s + 1) * h2 * w2].to_vec())
        };
        scales.push(WaveletScale { ll: band(0)?, lh: band(1)?, hl: band(2)?, hh: band(3)? });
        cur = Tensor::new(vec![1, h2, w2], band(0)?.into_data())?;
    }
    Ok(WaveletPyramid { scales })
}

pub(crate) fn haar_shape(shape: &[usize]) -> Result<[usize; 3]> {
    let [c, h, w]: [usize; 3] = shape
        .try_into()
        .map_err(|_| Error::shape("haar_scale", format!("expected rank 3, got {shape:?}")))?;
    Ok([4 * c, h.div_ceil(2), w.div_ceil(2)])
}

/// One analysis scale over a channel stack: `[c, h, w]` to
/// `[4c, ceil(h/2), ceil(w/2)]` with subbands ordered LL, LH, HL, HH
/// along the channel axis (all LL channels first, then all LH, ...).
pub(crate) fn haar_scale_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c4, h2, w2] = haar_shape(x.shape())?;
    let (c, h, w) = x.dims3()?;
    let xd = x.data();
    let mut out = vec![T::ZERO; c4 * h2 * w2];
    let plane = h2 * w2;
    for ch in 0..c {
        for oy in 0..h2 {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1); // edge replicate on odd height
            for ox in 0..w2 {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                let a = xd[(ch * h + y0) * w + x0].to_f64();
                let b = xd[(ch * h + y0) * w + x1].to_f64();
                let cc = xd[(ch * h + y1) * w + x0].to_f64();
                let d = xd[(ch * h + y1) * w + x1].to_f64();
                let o = oy * w2 + ox;
                out[ch * plane + o] = T::from_f64((a + b + cc + d) / 2.0);
                out[(c + ch) * plane + o] = T::from_f64((a - b + cc - d) / 2.0);
                out[(2 * c + ch) * plane + o] = T::from_f64((a + b - cc - d) / 2.0);
                out[(3 * c + ch) * plane + o] = T::from_f64((a - b - cc + d) / 2.0);
            }
        }
    }
    Tensor::new(vec![c4, h2, w2], out)
}

/// Adjoint of [`haar_scale_forward`]: scatters subband gradients back to
/// the pixels, summing where edge replication duplicated a tap.
pub(crate) fn haar_scale_backward<T: Scalar>(
    input_shape: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [c, h, w]: [usize; 3] = input_shape.try_into().expect("validated at forward");
    let (_, h2, w2) = gy.dims3()?;
    let gyd = gy.data();
    let plane = h2 * w2;
    let mut gx = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for oy in 0..h2 {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..w2 {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                let o = oy * w2 + ox;
                let gll = gyd[ch * plane + o].to_f64();
                let glh = gyd[(c + ch) * plane + o].to_f64();
                let ghl = gyd[(2 * c + ch) * plane + o].to_f64();
                let ghh = gyd[(3 * c + ch) * plane + o].to_f64();
                gx[(ch * h + y0) * w + x0] += (gll + glh + ghl + ghh) / 2.0;
                gx[(ch * h + y0) * w + x1] += (gll - glh + ghl - ghh) / 2.0;
                gx[(ch * h + y1) * w + x0] += (gll + glh - ghl - ghh) / 2.0;
                gx[(ch * h + y1) * w + x1] += (gll - glh - ghl + ghh) / 2.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], gx.into_iter().map(T::from_f64).collect())
}
