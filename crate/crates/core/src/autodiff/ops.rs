use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims, ConvGeom};
use super::{Graph, Op, Var};
use crate::augment::{CropParams, Nchw};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss between softmax outputs and probability targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftLoss {
    /// Mean squared error over all elements.
    Mse,
    /// Mean absolute error over all elements.
    Mae,
    /// KL(target || prediction), averaged over the batch.
    Kl,
}

pub(super) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut s = T::ZERO;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    out
}

pub(super) fn channel_means<T: Scalar>(x: &[T], d: Nchw) -> Vec<T> {
    let mut mean = vec![T::ZERO; d.c];
    for n in 0..d.n {
        for (c, m) in mean.iter_mut().enumerate() {
            let off = (n * d.c + c) * d.plane();
            *m += x[off..off + d.plane()].iter().copied().sum::<T>();
        }
    }
    let inv = T::ONE / T::from_usize(d.n * d.plane());
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Moves channel `g * per_group + i` to `i * groups + g`.
pub(super) fn shuffle_channels<T: Scalar>(x: &[T], d: Nchw, groups: usize) -> Vec<T> {
    let per_group = d.c / groups;
    let mut out = vec![T::ZERO; x.len()];
    for n in 0..d.n {
        for g in 0..groups {
            for i in 0..per_group {
                let src = (n * d.c + g * per_group + i) * d.plane();
                let dst = (n * d.c + i * groups + g) * d.plane();
                out[dst..dst + d.plane()].copy_from_slice(&x[src..src + d.plane()]);
            }
        }
    }
    out
}

pub(super) fn soft_target_grad<T: Scalar>(
    logits: &[T],
    targets: &[T],
    cols: usize,
    kind: SoftLoss,
    upstream: T,
) -> Vec<T> {
    let p = softmax_rows(logits, cols);
    let rows = logits.len() / cols;
    match kind {
        SoftLoss::Kl => {
            let k = upstream / T::from_usize(rows);
            p.iter().zip(targets).map(|(&pv, &q)| k * (pv - q)).collect()
        }
        SoftLoss::Mse | SoftLoss::Mae => {
            let k = upstream / T::from_usize(p.len());
            let dp: Vec<T> = p
                .iter()
                .zip(targets)
                .map(|(&pv, &q)| match kind {
                    SoftLoss::Mse => k * T::from_f64(2.0) * (pv - q),
                    _ => {
                        if pv > q {
                            k
                        } else if pv < q {
                            -k
                        } else {
                            T::ZERO
                        }
                    }
                })
                .collect();
            let mut out = vec![T::ZERO; p.len()];
            for ((pr, dr), or) in p.chunks(cols).zip(dp.chunks(cols)).zip(out.chunks_mut(cols)) {
                let s: T = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                for ((o, &pv), &dv) in or.iter_mut().zip(pr).zip(dr) {
                    *o = pv * (dv - s);
                }
            }
            out
        }
    }
}

pub(super) fn linear_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    input: Var,
    weight: Var,
    bias: Option<Var>,
) {
    let x = graph.value(input).data();
    let w = graph.value(weight).data();
    let (out_f, in_f) = (graph.shape(weight)[0], graph.shape(weight)[1]);
    let batch = x.len() / in_f;
    if graph.requires_grad(input) {
        let mut gx = vec![T::ZERO; x.len()];
        for b in 0..batch {
            let row = &mut gx[b * in_f..(b + 1) * in_f];
            for o in 0..out_f {
                kernels::axpy(row, g[b * out_f + o], &w[o * in_f..(o + 1) * in_f]);
            }
        }
        graph.accumulate(grads, input, gx);
    }
    if graph.requires_grad(weight) {
        let mut gw = vec![T::ZERO; w.len()];
        for b in 0..batch {
            let xr = &x[b * in_f..(b + 1) * in_f];
            for o in 0..out_f {
                kernels::axpy(&mut gw[o * in_f..(o + 1) * in_f], g[b * out_f + o], xr);
            }
        }
        graph.accumulate(grads, weight, gw);
    }
    if let Some(bv) = bias.filter(|&b| graph.requires_grad(b)) {
        let mut gb = vec![T::ZERO; out_f];
        for b in 0..batch {
            for o in 0..out_f {
                gb[o] += g[b * out_f + o];
            }
        }
        graph.accumulate(grads, bv, gb);
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batchnorm_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    input: Var,
    mean: Var,
    var: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) {
    let d = Nchw::from_shape(graph.shape(input)).expect("checked in forward");
    let x = graph.value(input).data();
    let (mu, vr, ga) = (
        graph.value(mean).data(),
        graph.value(var).data(),
        graph.value(gamma).data(),
    );
    let inv: Vec<T> = vr.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let need_x = graph.requires_grad(input);
    let mut gx = if need_x { vec![T::ZERO; x.len()] } else { Vec::new() };
    let (mut gmean, mut gvar, mut ggamma, mut gbeta) = (
        vec![T::ZERO; d.c],
        vec![T::ZERO; d.c],
        vec![T::ZERO; d.c],
        vec![T::ZERO; d.c],
    );
    let half = T::from_f64(0.5);
    for n in 0..d.n {
        for c in 0..d.c {
            let off = (n * d.c + c) * d.plane();
            let k = ga[c] * inv[c];
            let inv3 = inv[c] * inv[c] * inv[c];
            let (mut sg, mut sgx) = (T::ZERO, T::ZERO);
            for j in off..off + d.plane() {
                let centered = x[j] - mu[c];
                sg += g[j];
                sgx += g[j] * centered;
                if need_x {
                    gx[j] = g[j] * k;
                }
            }
            gbeta[c] += sg;
            ggamma[c] += sgx * inv[c];
            gmean[c] -= sg * k;
            gvar[c] -= sgx * ga[c] * half * inv3;
        }
    }
    if need_x {
        graph.accumulate(grads, input, gx);
    }
    graph.accumulate(grads, mean, gmean);
    graph.accumulate(grads, var, gvar);
    graph.accumulate(grads, gamma, ggamma);
    graph.accumulate(grads, beta, gbeta);
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel());
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Collapses all trailing axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = *shape.first().ok_or_else(|| Error::shape("flatten", "scalar"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::ZERO { x } else { T::ZERO })
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let d_in = self.nchw(input, "conv2d")?;
        let dims = ConvDims::new(d_in, self.shape(weight), geom).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, {geom:?}",
                    self.shape(input),
                    self.shape(weight)
                ),
            )
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let o = dims.out();
        let v = Tensor::new(vec![o.n, o.c, o.h, o.w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            &inputs,
        )
    }

    /// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, in_f, out_f) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (x, w) = (self.value(input).data(), self.value(weight).data());
        let mut out = Vec::with_capacity(batch * out_f);
        for r in 0..batch {
            let xr = &x[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                let mut v = kernels::dot(xr, &w[o * in_f..(o + 1) * in_f]);
                if let Some(b) = bias {
                    v += self.value(b).data()[o];
                }
                out.push(v);
            }
        }
        let v = Tensor::new(vec![batch, out_f], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            v,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        )
    }

    pub fn maxpool(&mut self, input: Var, k: usize) -> Result<Var> {
        let d = self.nchw(input, "maxpool")?;
        if k == 0 || d.h < k || d.w < k {
            return Err(Error::shape("maxpool", format!("kernel {k} on {d:?}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), d, k);
        let v = Tensor::new(vec![d.n, d.c, d.h / k, d.w / k], out)?;
        self.push("maxpool", v, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn avgpool(&mut self, input: Var, k: usize) -> Result<Var> {
        let d = self.nchw(input, "avgpool")?;
        if k == 0 || d.h < k || d.w < k {
            return Err(Error::shape("avgpool", format!("kernel {k} on {d:?}")));
        }
        let out = kernels::avgpool_forward(self.value(input).data(), d, k);
        let v = Tensor::new(vec![d.n, d.c, d.h / k, d.w / k], out)?;
        self.push("avgpool", v, Op::AvgPool { input, k }, &[input])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let d = self.nchw(input, "global_avgpool")?;
        let inv = T::ONE / T::from_usize(d.plane());
        let out = self
            .value(input)
            .data()
            .chunks(d.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(vec![d.n, d.c], out)?;
        self.push("global_avgpool", v, Op::GlobalAvgPool(input), &[input])
    }

    /// Per-channel mean over (batch, height, width).
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let d = self.nchw(input, "channel_mean")?;
        let mean = channel_means(self.value(input).data(), d);
        self.push(
            "channel_mean",
            Tensor::from_vec(mean),
            Op::ChannelMean(input),
            &[input],
        )
    }

    /// Per-channel biased (population) variance over (batch, height, width).
    pub fn channel_var(&mut self, input: Var) -> Result<Var> {
        let d = self.nchw(input, "channel_var")?;
        let x = self.value(input).data();
        let mean = channel_means(x, d);
        let mut var = vec![T::ZERO; d.c];
        for n in 0..d.n {
            for c in 0..d.c {
                let off = (n * d.c + c) * d.plane();
                var[c] += x[off..off + d.plane()]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
        }
        let inv = T::ONE / T::from_usize(d.n * d.plane());
        var.iter_mut().for_each(|v| *v *= inv);
        self.push(
            "channel_var",
            Tensor::from_vec(var),
            Op::ChannelVar(input),
            &[input],
        )
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
    pub fn batch_norm(
        &mut self,
        input: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let d = self.nchw(input, "batch_norm")?;
        for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [d.c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?} for {} channels", self.shape(v), d.c),
                ));
            }
        }
        let x = self.value(input).data();
        let (mu, vr, ga, be) = (
            self.value(mean).data(),
            self.value(var).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = Vec::with_capacity(x.len());
        for n in 0..d.n {
            for c in 0..d.c {
                let off = (n * d.c + c) * d.plane();
                let k = ga[c] / (vr[c] + eps).sqrt();
                out.extend(x[off..off + d.plane()].iter().map(|&v| (v - mu[c]) * k + be[c]));
            }
        }
        let v = Tensor::new(vec![d.n, d.c, d.h, d.w], out)?;
        self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                input,
                mean,
                var,
                gamma,
                beta,
                eps,
            },
            &[input, mean, var, gamma, beta],
        )
    }

    pub fn channel_shuffle(&mut self, input: Var, groups: usize) -> Result<Var> {
        let d = self.nchw(input, "channel_shuffle")?;
        if groups == 0 || d.c % groups != 0 {
            return Err(Error::shape(
                "channel_shuffle",
                format!("{} channels into {groups} groups", d.c),
            ));
        }
        let out = shuffle_channels(self.value(input).data(), d, groups);
        let v = Tensor::new(vec![d.n, d.c, d.h, d.w], out)?;
        self.push(
            "channel_shuffle",
            v,
            Op::ChannelShuffle { input, groups },
            &[input],
        )
    }

    /// Row-wise softmax of a `[B, C]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(Error::shape("softmax", format!("{s:?}")));
        }
        let cols = s[1];
        let v = Tensor::new(s.to_vec(), softmax_rows(self.value(input).data(), cols))?;
        self.push("softmax", v, Op::Softmax(input), &[input])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("{s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        if b == 0 || labels.is_empty() {
            return Err(Error::Empty("cross_entropy batch"));
        }
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch {b}", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: c,
            });
        }
        let x = self.value(logits).data();
        let mut total = T::ZERO;
        for (row, &l) in x.chunks(c).zip(labels) {
            let m = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            total += lse - row[l];
        }
        let v = Tensor::scalar(total / T::from_usize(b));
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Loss between `softmax(logits)` and probability rows `targets`.
    pub fn soft_target_loss(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        kind: SoftLoss,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.shape() != s {
            return Err(Error::shape(
                "soft_target_loss",
                format!("logits {s:?}, targets {:?}", targets.shape()),
            ));
        }
        if s[0] == 0 {
            return Err(Error::Empty("soft_target_loss batch"));
        }
        let cols = s[1];
        let p = softmax_rows(self.value(logits).data(), cols);
        let q = targets.data();
        let value = match kind {
            SoftLoss::Mse => {
                p.iter().zip(q).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>()
                    / T::from_usize(p.len())
            }
            SoftLoss::Mae => {
                p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<T>() / T::from_usize(p.len())
            }
            SoftLoss::Kl => {
                let tiny = T::from_f64(1e-12);
                p.iter()
                    .zip(q)
                    .filter(|(_, &b)| b > T::ZERO)
                    .map(|(&a, &b)| b * (b.ln() - a.max(tiny).ln()))
                    .sum::<T>()
                    / T::from_usize(s[0])
            }
        };
        self.push(
            "soft_target_loss",
            Tensor::scalar(value),
            Op::SoftTarget {
                logits,
                targets: q.to_vec(),
                kind,
            },
            &[logits],
        )
    }

    /// Euclidean norm `||input - target||_2` (not squared).
    pub fn l2_distance(&mut self, input: Var, target: &[T]) -> Result<Var> {
        if self.value(input).numel() != target.len() {
            return Err(Error::shape(
                "l2_distance",
                format!("{:?} vs {} targets", self.shape(input), target.len()),
            ));
        }
        let sq: T = self
            .value(input)
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(
            "l2_distance",
            Tensor::scalar(sq.sqrt()),
            Op::L2Dist {
                input,
                target: target.to_vec(),
            },
            &[input],
        )
    }

    /// Differentiable per-image crop and bilinear resize to `out_h x out_w`.
    pub fn crop_resize(
        &mut self,
        input: Var,
        crops: &[CropParams],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let d = self.nchw(input, "crop_resize")?;
        if crops.len() != d.n {
            return Err(Error::shape(
                "crop_resize",
                format!("{} crops for batch {}", crops.len(), d.n),
            ));
        }
        if let Some(c) = crops.iter().find(|c| !c.fits(d.h, d.w)) {
            return Err(Error::shape(
                "crop_resize",
                format!("{c:?} outside {}x{}", d.h, d.w),
            ));
        }
        let out = crate::augment::crop_resize_forward(self.value(input).data(), d, crops, out_h, out_w);
        let v = Tensor::new(vec![d.n, d.c, out_h, out_w], out)?;
        self.push(
            "crop_resize",
            v,
            Op::CropResize {
                input,
                crops: crops.to_vec(),
                out_h,
                out_w,
            },
            &[input],
        )
    }
}
