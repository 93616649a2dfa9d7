//! Architecture families for the teacher pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Width of the classifier input.
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
}

/// Names accepted by [`ArchSpec::family`].
pub const FAMILIES: [&str; 5] = [
    "convnet-deep",
    "convnet-wide",
    "depthwise-sep",
    "shuffle",
    "inverted-residual",
];

fn conv_bn_relu(cin: usize, cout: usize, kernel: usize, stride: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::conv(cin, cout, kernel, stride),
        LayerSpec::bn(cout),
        LayerSpec::Relu,
    ]
}

fn head(features: usize, classes: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            inp: features,
            out: classes,
        },
    ]
}

impl ArchSpec {
    /// Builds one of the [`FAMILIES`] for `num_classes` outputs and
    /// 3-channel `size x size` inputs.
    pub fn family(name: &str, num_classes: usize, size: usize) -> Result<Self> {
        use LayerSpec as L;
        let mut layers: Vec<LayerSpec> = Vec::new();
        let feature_dim = match name {
            // residual stages at 16x16 and 8x8
            "convnet-deep" => {
                layers.extend(conv_bn_relu(3, 8, 3, 2));
                layers.push(L::Residual {
                    body: vec![
                        L::conv(8, 8, 3, 1),
                        L::bn(8),
                        L::Relu,
                        L::conv(8, 8, 3, 1),
                        L::bn(8),
                    ],
                });
                layers.push(L::Relu);
                layers.extend(conv_bn_relu(8, 16, 3, 2));
                layers.push(L::Residual {
                    body: vec![
                        L::conv(16, 16, 3, 1),
                        L::bn(16),
                        L::Relu,
                        L::conv(16, 16, 3, 1),
                        L::bn(16),
                    ],
                });
                layers.push(L::Relu);
                16
            }
            "convnet-wide" => {
                layers.extend(conv_bn_relu(3, 16, 3, 2));
                layers.extend(conv_bn_relu(16, 32, 3, 2));
                layers.push(L::MaxPool { kernel: 2 });
                layers.extend(conv_bn_relu(32, 48, 3, 1));
                48
            }
            "depthwise-sep" => {
                layers.extend(conv_bn_relu(3, 16, 3, 2));
                layers.extend([L::depthwise(16, 1), L::bn(16), L::Relu]);
                layers.extend(conv_bn_relu(16, 32, 1, 1));
                layers.extend([L::depthwise(32, 2), L::bn(32), L::Relu]);
                layers.extend(conv_bn_relu(32, 64, 1, 1));
                64
            }
            "shuffle" => {
                layers.extend(conv_bn_relu(3, 12, 3, 2));
                layers.extend([L::grouped_pointwise(12, 24, 3), L::bn(24), L::Relu]);
                layers.push(L::ChannelShuffle { groups: 3 });
                layers.extend([L::depthwise(24, 2), L::bn(24)]);
                layers.extend([L::grouped_pointwise(24, 48, 3), L::bn(48), L::Relu]);
                layers.push(L::Residual {
                    body: vec![
                        L::grouped_pointwise(48, 48, 3),
                        L::bn(48),
                        L::Relu,
                        L::ChannelShuffle { groups: 3 },
                        L::depthwise(48, 1),
                        L::bn(48),
                        L::grouped_pointwise(48, 48, 3),
                        L::bn(48),
                    ],
                });
                layers.push(L::Relu);
                48
            }
            "inverted-residual" => {
                layers.extend(conv_bn_relu(3, 16, 3, 2));
                layers.extend(conv_bn_relu(16, 32, 1, 1));
                layers.extend([L::depthwise(32, 2), L::bn(32), L::Relu]);
                layers.extend([L::conv(32, 24, 1, 1), L::bn(24)]);
                layers.push(L::Residual {
                    body: vec![
                        L::conv(24, 72, 1, 1),
                        L::bn(72),
                        L::Relu,
                        L::depthwise(72, 1),
                        L::bn(72),
                        L::Relu,
                        L::conv(72, 24, 1, 1),
                        L::bn(24),
                    ],
                });
                layers.extend(conv_bn_relu(24, 64, 1, 1));
                64
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown architecture family {other:?}; expected one of {FAMILIES:?}"
                )))
            }
        };
        layers.extend(head(feature_dim, num_classes));
        let arch = Self {
            name: name.to_string(),
            layers,
            feature_dim,
            num_classes,
            input: [3, size, size],
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("architecture needs at least one class"));
        }
        if self.bn_count() == 0 {
            return Err(Error::invalid(format!("architecture {} has no batch-norm layer", self.name)));
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { inp, out }) if *out == self.num_classes && *inp == self.feature_dim => {
                Ok(())
            }
            _ => Err(Error::invalid(format!(
                "architecture {} must end in Linear({}, {})",
                self.name, self.feature_dim, self.num_classes
            ))),
        }
    }

    pub fn bn_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::count_bn).sum()
    }

    pub fn bn_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.bn_channels(&mut out));
        out
    }

    /// Trainable tensor names and shapes in traversal order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_shapes(&i.to_string()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
