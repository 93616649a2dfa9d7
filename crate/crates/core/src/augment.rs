//! Random resized crops with bilinear resampling and horizontal flips.
//!
//! The resampling is a fixed sparse linear map once the crop is drawn, so the
//! autodiff engine can push gradients back through it to the source pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A crop box in source pixel coordinates plus a flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropParams {
    pub top: u32,
    pub left: u32,
    pub height: u32,
    pub width: u32,
    pub flip: bool,
}

impl CropParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: height as u32,
            width: width as u32,
            flip: false,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0
            && self.width > 0
            && (self.top + self.height) as usize <= height
            && (self.left + self.width) as usize <= width
    }
}

const RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Draws a random resized crop: area fraction uniform in `scale`, aspect
/// ratio log-uniform in [3/4, 4/3], falling back to the full image after ten
/// rejected attempts.
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    scale: (f32, f32),
    flip_prob: f32,
) -> CropParams {
    let area = (height * width) as f64;
    let (lo, hi) = (scale.0 as f64, scale.1 as f64);
    let (log_r0, log_r1) = (RATIO.0.ln(), RATIO.1.ln());
    let mut crop = CropParams::identity(height, width);
    for _ in 0..10 {
        let target = area * rng.random_range(lo..=hi);
        let aspect = rng.random_range(log_r0..=log_r1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            crop = CropParams {
                top: top as u32,
                left: left as u32,
                height: h as u32,
                width: w as u32,
                flip: false,
            };
            break;
        }
    }
    crop.flip = flip_prob > 0.0 && rng.random::<f32>() < flip_prob;
    crop
}

/// Source taps along one axis: (index0, index1, weight of index1).
fn axis_taps(offset: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (offset + i0, offset + i1, src - i0 as f64)
        })
        .collect()
}

struct Taps<T> {
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
}

fn taps<T: Scalar>(crop: &CropParams, out_h: usize, out_w: usize) -> Taps<T> {
    let conv = |v: Vec<(usize, usize, f64)>| {
        v.into_iter()
            .map(|(a, b, f)| (a, b, T::from_f64(f)))
            .collect::<Vec<_>>()
    };
    let rows = conv(axis_taps(crop.top as usize, crop.height as usize, out_h));
    let mut cols = conv(axis_taps(crop.left as usize, crop.width as usize, out_w));
    if crop.flip {
        cols.reverse();
    }
    Taps { rows, cols }
}

/// Geometry of an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Self { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Crops image `i` with `crops[i]` and resamples to `out_h x out_w`.
pub fn crop_resize_forward<T: Scalar>(
    input: &[T],
    dims: Nchw,
    crops: &[CropParams],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; dims.n * dims.c * out_h * out_w];
    for (i, crop) in crops.iter().enumerate() {
        let t = taps::<T>(crop, out_h, out_w);
        for ch in 0..dims.c {
            let src = &input[(i * dims.c + ch) * dims.plane()..][..dims.plane()];
            let dst = &mut out[(i * dims.c + ch) * out_h * out_w..][..out_h * out_w];
            for (y, &(r0, r1, fy)) in t.rows.iter().enumerate() {
                let (row0, row1) = (&src[r0 * dims.w..], &src[r1 * dims.w..]);
                for (x, &(c0, c1, fx)) in t.cols.iter().enumerate() {
                    let top = row0[c0] + (row0[c1] - row0[c0]) * fx;
                    let bot = row1[c0] + (row1[c1] - row1[c0]) * fx;
                    dst[y * out_w + x] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`crop_resize_forward`]: accumulates `grad_out` into `grad_in`.
pub fn crop_resize_backward<T: Scalar>(
    grad_out: &[T],
    dims: Nchw,
    crops: &[CropParams],
    out_h: usize,
    out_w: usize,
    grad_in: &mut [T],
) {
    for (i, crop) in crops.iter().enumerate() {
        let t = taps::<T>(crop, out_h, out_w);
        for ch in 0..dims.c {
            let dst = &mut grad_in[(i * dims.c + ch) * dims.plane()..][..dims.plane()];
            let src = &grad_out[(i * dims.c + ch) * out_h * out_w..][..out_h * out_w];
            for (y, &(r0, r1, fy)) in t.rows.iter().enumerate() {
                for (x, &(c0, c1, fx)) in t.cols.iter().enumerate() {
                    let g = src[y * out_w + x];
                    let (gt, gb) = (g * (T::ONE - fy), g * fy);
                    dst[r0 * dims.w + c0] += gt * (T::ONE - fx);
                    dst[r0 * dims.w + c1] += gt * fx;
                    dst[r1 * dims.w + c0] += gb * (T::ONE - fx);
                    dst[r1 * dims.w + c1] += gb * fx;
                }
            }
        }
    }
}
