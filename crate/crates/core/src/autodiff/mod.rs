//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every op appends a node holding its forward value
//! and enough context to run its backward rule. Nodes are only ever appended,
//! so the node order is a topological order and [`Graph::backward`] walks it in
//! reverse. A tape supports one backward pass; call [`Graph::reset`] to reuse
//! the allocation.

pub mod gradcheck;
pub mod kernels;
mod ops;

use std::collections::HashMap;

pub use kernels::ConvGeom;
pub use ops::SoftLoss;

use crate::augment::{CropParams, Nchw};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::ConvDims;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelVar(Var),
    BatchNorm {
        input: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    ChannelShuffle {
        input: Var,
        groups: usize,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    SoftTarget {
        logits: Var,
        targets: Vec<T>,
        kind: SoftLoss,
    },
    L2Dist {
        input: Var,
        target: Vec<T>,
    },
    CropResize {
        input: Var,
        crops: Vec<CropParams>,
        out_h: usize,
        out_w: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// The recording tape.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the tape so it can record a new computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn nchw(&self, v: Var, op: &'static str) -> Result<Nchw> {
        Nchw::from_shape(self.shape(v))
            .ok_or_else(|| Error::shape(op, format!("expected NCHW, got {:?}", self.shape(v))))
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.map
                    .insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::from_usize(n); n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let gi = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > T::ZERO { gv } else { T::ZERO })
                    .collect();
                self.accumulate(grads, *a, gi);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let cg = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    dims,
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => ops::linear_backward(self, grads, g, *input, *weight, *bias),
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![T::ZERO; val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gi[idx] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::AvgPool { input, k } => {
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let mut gi = vec![T::ZERO; d.n * d.image()];
                kernels::avgpool_backward(g, d, *k, &mut gi);
                self.accumulate(grads, *input, gi);
            }
            Op::GlobalAvgPool(input) => {
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let inv = T::ONE / T::from_usize(d.plane());
                let mut gi = Vec::with_capacity(d.n * d.image());
                for &gv in g {
                    gi.extend(std::iter::repeat_n(gv * inv, d.plane()));
                }
                self.accumulate(grads, *input, gi);
            }
            Op::ChannelMean(input) => {
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let inv = T::ONE / T::from_usize(d.n * d.plane());
                let mut gi = Vec::with_capacity(d.n * d.image());
                for _ in 0..d.n {
                    for &gv in g {
                        gi.extend(std::iter::repeat_n(gv * inv, d.plane()));
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::ChannelVar(input) => {
                let x = val(*input);
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let mean = ops::channel_means(x, d);
                let scale = T::from_f64(2.0) / T::from_usize(d.n * d.plane());
                let mut gi = vec![T::ZERO; x.len()];
                for n in 0..d.n {
                    for c in 0..d.c {
                        let off = (n * d.c + c) * d.plane();
                        let k = g[c] * scale;
                        for j in off..off + d.plane() {
                            gi[j] = k * (x[j] - mean[c]);
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::BatchNorm {
                input,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => ops::batchnorm_backward(
                self, grads, g, *input, *mean, *var, *gamma, *beta, *eps,
            ),
            Op::ChannelShuffle { input, groups } => {
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let gi = ops::shuffle_channels(g, d, d.c / *groups);
                self.accumulate(grads, *input, gi);
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("2-d");
                let mut gi = vec![T::ZERO; y.len()];
                for ((gr, yr), out) in g
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .zip(gi.chunks_mut(cols))
                {
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::CrossEntropy { logits, labels } => {
                let cols = self.shape(*logits)[1];
                let b = labels.len();
                let scale = g[0] / T::from_usize(b);
                let mut gi = ops::softmax_rows(val(*logits), cols);
                for (r, &l) in labels.iter().enumerate() {
                    gi[r * cols + l] -= T::ONE;
                }
                gi.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, gi);
            }
            Op::SoftTarget {
                logits,
                targets,
                kind,
            } => {
                let cols = self.shape(*logits)[1];
                let gi = ops::soft_target_grad(val(*logits), targets, cols, *kind, g[0]);
                self.accumulate(grads, *logits, gi);
            }
            Op::L2Dist { input, target } => {
                let norm = node.value.data()[0];
                let gi = if norm > T::ZERO {
                    let k = g[0] / norm;
                    val(*input)
                        .iter()
                        .zip(target)
                        .map(|(&x, &t)| k * (x - t))
                        .collect()
                } else {
                    vec![T::ZERO; target.len()]
                };
                self.accumulate(grads, *input, gi);
            }
            Op::CropResize {
                input,
                crops,
                out_h,
                out_w,
            } => {
                let d = Nchw::from_shape(self.shape(*input)).expect("checked in forward");
                let mut gi = vec![T::ZERO; d.n * d.image()];
                crate::augment::crop_resize_backward(g, d, crops, *out_h, *out_w, &mut gi);
                self.accumulate(grads, *input, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests;
