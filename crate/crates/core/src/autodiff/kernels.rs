//! Dense kernels behind the graph ops. Per-sample work may run on the rayon
//! pool; every reduction across samples happens afterwards in sample order, so
//! results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Nchw;
use crate::scalar::Scalar;

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators (fixed order per length).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Shape bookkeeping for one conv call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub input: Nchw,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn new(input: Nchw, wshape: &[usize], geom: ConvGeom) -> Option<Self> {
        let [cout, cin_g, kh, kw] = *wshape else {
            return None;
        };
        let g = geom.groups;
        if g == 0 || geom.stride == 0 || input.c != cin_g * g || cout % g != 0 {
            return None;
        }
        let (ph, pw) = (input.h + 2 * geom.padding, input.w + 2 * geom.padding);
        if ph < kh || pw < kw {
            return None;
        }
        Some(Self {
            input,
            cout,
            kh,
            kw,
            oh: (ph - kh) / geom.stride + 1,
            ow: (pw - kw) / geom.stride + 1,
            geom,
        })
    }

    fn cin_g(&self) -> usize {
        self.input.c / self.geom.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.geom.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    pub fn out(&self) -> Nchw {
        Nchw {
            n: self.input.n,
            c: self.cout,
            h: self.oh,
            w: self.ow,
        }
    }
}

fn im2col<T: Scalar>(sample: &[T], d: &ConvDims, group: usize, cols: &mut [T]) {
    let (h, w) = (d.input.h as isize, d.input.w as isize);
    let (s, pad) = (d.geom.stride as isize, d.geom.padding as isize);
    let p = d.p();
    let c0 = group * d.cin_g();
    for ci in 0..d.cin_g() {
        let plane = &sample[(c0 + ci) * d.input.plane()..][..d.input.plane()];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - pad;
                    let seg = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= h {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * d.input.w..][..d.input.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - pad;
                        *v = if ix < 0 || ix >= w {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, group: usize, sample: &mut [T]) {
    let (h, w) = (d.input.h as isize, d.input.w as isize);
    let (s, pad) = (d.geom.stride as isize, d.geom.padding as isize);
    let p = d.p();
    let c0 = group * d.cin_g();
    for ci in 0..d.cin_g() {
        let plane = &mut sample[(c0 + ci) * d.input.plane()..][..d.input.plane()];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.input.w..][..d.input.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let out_img = d.cout * d.p();
    let mut out = vec![T::ZERO; d.input.n * out_img];
    let (k, p, cout_g) = (d.k(), d.p(), d.cout_g());
    out.par_chunks_mut(out_img)
        .enumerate()
        .for_each(|(n, out_s)| {
            let sample = &input[n * d.input.image()..][..d.input.image()];
            let mut cols = if d.pointwise() {
                Vec::new()
            } else {
                vec![T::ZERO; k * p]
            };
            for g in 0..d.geom.groups {
                let cols_ref: &[T] = if d.pointwise() {
                    &sample[g * d.cin_g() * p..][..k * p]
                } else {
                    im2col(sample, d, g, &mut cols);
                    &cols
                };
                for co in g * cout_g..(g + 1) * cout_g {
                    let row = &mut out_s[co * p..][..p];
                    if let Some(b) = bias {
                        row.fill(b[co]);
                    }
                    let wrow = &weight[co * k..][..k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        axpy(row, wv, &cols_ref[kk * p..][..p]);
                    }
                }
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (k, p, cout_g) = (d.k(), d.p(), d.cout_g());
    let out_img = d.cout * p;
    let wlen = weight.len();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..d.input.n)
        .into_par_iter()
        .map(|n| {
            let sample = &input[n * d.input.image()..][..d.input.image()];
            let gout = &grad_out[n * out_img..][..out_img];
            let mut gin = if need_input {
                vec![T::ZERO; d.input.image()]
            } else {
                Vec::new()
            };
            let mut gw = if need_weight {
                vec![T::ZERO; wlen]
            } else {
                Vec::new()
            };
            let mut cols = vec![T::ZERO; if need_weight { k * p } else { 0 }];
            let mut dcols = vec![T::ZERO; if need_input { k * p } else { 0 }];
            for g in 0..d.geom.groups {
                if need_weight {
                    let cols_ref: &[T] = if d.pointwise() {
                        &sample[g * d.cin_g() * p..][..k * p]
                    } else {
                        im2col(sample, d, g, &mut cols);
                        &cols
                    };
                    for co in g * cout_g..(g + 1) * cout_g {
                        let go = &gout[co * p..][..p];
                        let gwrow = &mut gw[co * k..][..k];
                        for (kk, gv) in gwrow.iter_mut().enumerate() {
                            *gv += dot(go, &cols_ref[kk * p..][..p]);
                        }
                    }
                }
                if need_input {
                    dcols.fill(T::ZERO);
                    for co in g * cout_g..(g + 1) * cout_g {
                        let go = &gout[co * p..][..p];
                        let wrow = &weight[co * k..][..k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            axpy(&mut dcols[kk * p..][..p], wv, go);
                        }
                    }
                    if d.pointwise() {
                        let dst = &mut gin[g * d.cin_g() * p..][..k * p];
                        for (a, &b) in dst.iter_mut().zip(&dcols) {
                            *a += b;
                        }
                    } else {
                        col2im(&dcols, d, g, &mut gin);
                    }
                }
            }
            (gin, gw)
        })
        .collect();

    let input_grad = need_input.then(|| {
        let mut v = Vec::with_capacity(input.len());
        for (gin, _) in &per_sample {
            v.extend_from_slice(gin);
        }
        v
    });
    let weight_grad = need_weight.then(|| {
        let mut acc = vec![T::ZERO; wlen];
        for (_, gw) in &per_sample {
            for (a, &b) in acc.iter_mut().zip(gw) {
                *a += b;
            }
        }
        acc
    });
    let bias_grad = need_bias.then(|| {
        let mut acc = vec![T::ZERO; d.cout];
        for n in 0..d.input.n {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += grad_out[n * out_img + co * p..][..p].iter().copied().sum();
            }
        }
        acc
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Non-overlapping `k x k` max pooling; returns values and flat argmax indices.
pub fn maxpool_forward<T: Scalar>(input: &[T], d: Nchw, k: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (d.h / k, d.w / k);
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * d.w + ox * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * d.w + ox * k + kx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avgpool_forward<T: Scalar>(input: &[T], d: Nchw, k: usize) -> Vec<T> {
    let (oh, ow) = (d.h / k, d.w / k);
    let inv = T::ONE / T::from_usize(k * k);
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::ZERO;
                for ky in 0..k {
                    let row = base + (oy * k + ky) * d.w + ox * k;
                    for kx in 0..k {
                        s += input[row + kx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(grad_out: &[T], d: Nchw, k: usize, grad_in: &mut [T]) {
    let (oh, ow) = (d.h / k, d.w / k);
    let inv = T::ONE / T::from_usize(k * k);
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    let row = base + (oy * k + ky) * d.w + ox * k;
                    for kx in 0..k {
                        grad_in[row + kx] += g;
                    }
                }
            }
        }
    }
}
