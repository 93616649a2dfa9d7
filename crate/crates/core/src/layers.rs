//! Layer specifications and the network forward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    MaxPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        inp: usize,
        out: usize,
    },
    Softmax,
    ChannelShuffle {
        groups: usize,
    },
    /// `x + body(x)`.
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            cin: channels,
            cout: channels,
            kernel: 3,
            stride,
            padding: 1,
            groups: channels,
        }
    }

    pub fn grouped_pointwise(cin: usize, cout: usize, groups: usize) -> Self {
        LayerSpec::Conv2d {
            cin,
            cout,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups,
        }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::BatchNorm2d { channels }
    }

    /// Names and shapes of the trainable tensors owned by this layer.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                cin,
                cout,
                kernel,
                groups,
                ..
            } => vec![
                (
                    format!("{prefix}.weight"),
                    vec![*cout, cin / groups, *kernel, *kernel],
                ),
                (format!("{prefix}.bias"), vec![*cout]),
            ],
            LayerSpec::BatchNorm2d { channels } => vec![
                (format!("{prefix}.weight"), vec![*channels]),
                (format!("{prefix}.bias"), vec![*channels]),
            ],
            LayerSpec::Linear { inp, out } => vec![
                (format!("{prefix}.weight"), vec![*out, *inp]),
                (format!("{prefix}.bias"), vec![*out]),
            ],
            LayerSpec::Residual { body } => body
                .iter()
                .enumerate()
                .flat_map(|(i, l)| l.param_shapes(&format!("{prefix}.{i}")))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn count_bn(&self) -> usize {
        match self {
            LayerSpec::BatchNorm2d { .. } => 1,
            LayerSpec::Residual { body } => body.iter().map(Self::count_bn).sum(),
            _ => 0,
        }
    }

    /// Channel counts of the batch-norm layers in traversal order.
    pub fn bn_channels(&self, out: &mut Vec<usize>) {
        match self {
            LayerSpec::BatchNorm2d { channels } => out.push(*channels),
            LayerSpec::Residual { body } => body.iter().for_each(|l| l.bn_channels(out)),
            _ => {}
        }
    }
}

/// How batch-norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Normalize with batch statistics (captured for running-stat updates).
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics, and also record the batch
    /// mean/variance of every BN input as differentiable nodes.
    StatCapture,
}

/// Batch statistics of one BN layer's input.
#[derive(Clone, Copy, Debug)]
pub struct BnCapture {
    pub mean: Var,
    pub var: Var,
}

/// Graph handles for the tensors a single layer reads.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerParams {
    pub weight: Option<Var>,
    pub bias: Option<Var>,
    /// Running (mean, variance) for batch norm.
    pub running: Option<(Var, Var)>,
}

pub struct LayerOutput {
    pub output: Var,
    pub capture: Option<BnCapture>,
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::invalid(format!("layer is missing its {what}")))
}

/// Applies one non-residual layer.
pub fn forward_layer<T: Scalar>(
    g: &mut Graph<T>,
    layer: &LayerSpec,
    params: LayerParams,
    input: Var,
    mode: Mode,
) -> Result<LayerOutput> {
    let plain = |output| LayerOutput {
        output,
        capture: None,
    };
    Ok(match layer {
        LayerSpec::Conv2d {
            cin,
            stride,
            padding,
            groups,
            ..
        } => {
            let s = g.shape(input);
            if s.len() != 4 || s[1] != *cin {
                return Err(Error::shape("conv2d layer", format!("expected {cin} channels, got {s:?}")));
            }
            let geom = ConvGeom {
                stride: *stride,
                padding: *padding,
                groups: *groups,
            };
            plain(g.conv2d(input, need(params.weight, "weight")?, params.bias, geom)?)
        }
        LayerSpec::BatchNorm2d { channels } => {
            let s = g.shape(input);
            if s.len() != 4 || s[1] != *channels {
                return Err(Error::shape("batchnorm2d", format!("expected {channels} channels, got {s:?}")));
            }
            let gamma = need(params.weight, "weight")?;
            let beta = need(params.bias, "bias")?;
            let eps = T::from_f64(BN_EPS);
            match mode {
                Mode::Train => {
                    let mean = g.channel_mean(input)?;
                    let var = g.channel_var(input)?;
                    let out = g.batch_norm(input, mean, var, gamma, beta, eps)?;
                    LayerOutput {
                        output: out,
                        capture: Some(BnCapture { mean, var }),
                    }
                }
                Mode::Eval | Mode::StatCapture => {
                    let (rm, rv) = params
                        .running
                        .ok_or_else(|| Error::invalid("batch norm without running statistics"))?;
                    let capture = if mode == Mode::StatCapture {
                        Some(BnCapture {
                            mean: g.channel_mean(input)?,
                            var: g.channel_var(input)?,
                        })
                    } else {
                        None
                    };
                    LayerOutput {
                        output: g.batch_norm(input, rm, rv, gamma, beta, eps)?,
                        capture,
                    }
                }
            }
        }
        LayerSpec::Relu => plain(g.relu(input)?),
        LayerSpec::AvgPool { kernel } => plain(g.avgpool(input, *kernel)?),
        LayerSpec::MaxPool { kernel } => plain(g.maxpool(input, *kernel)?),
        LayerSpec::GlobalAvgPool => plain(g.global_avgpool(input)?),
        LayerSpec::Flatten => plain(g.flatten(input)?),
        LayerSpec::Linear { inp, .. } => {
            let s = g.shape(input);
            if s.len() != 2 || s[1] != *inp {
                return Err(Error::shape("linear layer", format!("expected [B, {inp}], got {s:?}")));
            }
            plain(g.linear(input, need(params.weight, "weight")?, params.bias)?)
        }
        LayerSpec::Softmax => plain(g.softmax(input)?),
        LayerSpec::ChannelShuffle { groups } => plain(g.channel_shuffle(input, *groups)?),
        LayerSpec::Residual { .. } => {
            return Err(Error::invalid("residual blocks are run by forward_network"));
        }
    })
}

/// Model tensors loaded onto a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    pub params: BTreeMap<String, Var>,
    /// Running (mean, variance) per BN layer in traversal order.
    pub running: Vec<(Var, Var)>,
}

pub struct NetOutput {
    pub logits: Var,
    /// Input to the final linear classifier.
    pub features: Var,
    pub bn: Vec<BnCapture>,
}

struct Walk<'a> {
    bound: &'a BoundParams,
    mode: Mode,
    bn_index: usize,
    captures: Vec<BnCapture>,
}

impl Walk<'_> {
    fn run<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        layers: &[LayerSpec],
        prefix: &str,
        mut x: Var,
        features: &mut Option<Var>,
    ) -> Result<Var> {
        for (i, layer) in layers.iter().enumerate() {
            let path = if prefix.is_empty() {
                i.to_string()
            } else {
                format!("{prefix}.{i}")
            };
            if prefix.is_empty() && i + 1 == layers.len() {
                *features = Some(x);
            }
            x = match layer {
                LayerSpec::Residual { body } => {
                    let y = self.run(g, body, &path, x, &mut None)?;
                    g.add(x, y)?
                }
                _ => {
                    let mut lp = LayerParams {
                        weight: self.bound.params.get(&format!("{path}.weight")).copied(),
                        bias: self.bound.params.get(&format!("{path}.bias")).copied(),
                        running: None,
                    };
                    if matches!(layer, LayerSpec::BatchNorm2d { .. }) {
                        lp.running = self.bound.running.get(self.bn_index).copied();
                        self.bn_index += 1;
                    }
                    let out = forward_layer(g, layer, lp, x, self.mode)?;
                    self.captures.extend(out.capture);
                    out.output
                }
            };
        }
        Ok(x)
    }
}

/// Runs a layer stack; the last top-level layer is the classifier.
pub fn forward_network<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerSpec],
    bound: &BoundParams,
    input: Var,
    mode: Mode,
) -> Result<NetOutput> {
    let mut walk = Walk {
        bound,
        mode,
        bn_index: 0,
        captures: Vec::new(),
    };
    let mut features = None;
    let logits = walk.run(g, layers, "", input, &mut features)?;
    Ok(NetOutput {
        logits,
        features: features.unwrap_or(input),
        bn: walk.captures,
    })
}
