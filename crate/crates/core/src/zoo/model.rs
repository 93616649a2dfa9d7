use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{forward_network, BnCapture, BoundParams, Mode, NetOutput};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ArchSpec;

pub const BN_MOMENTUM: f32 = 0.1;

/// Running statistics of one batch-norm layer; `layer` is its traversal index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStat {
    pub layer: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub arch: ArchSpec,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub bn_stats: Vec<BnStat>,
    pub train_accuracy: f32,
    pub heldout_accuracy: f32,
    pub seed: u64,
}

/// Students share the teacher representation.
pub type StudentModel = TeacherModel;

impl TeacherModel {
    /// Kaiming-normal convolution and linear weights, zero biases, unit BN
    /// scale, running statistics at (0, 1).
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        for (i, (name, shape)) in arch.param_shapes().into_iter().enumerate() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else if shape.len() == 1 {
                vec![1.0; numel]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if shape.len() == 2 { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0f32, (gain / fan_in as f32).sqrt()).unwrap();
                let mut r = rng::stream(seed, Domain::Init, &[i as u64]);
                (0..numel).map(|_| normal.sample(&mut r)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        let bn_stats = arch
            .bn_channels()
            .into_iter()
            .enumerate()
            .map(|(layer, c)| BnStat {
                layer,
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(Self {
            arch,
            params,
            bn_stats,
            train_accuracy: 0.0,
            heldout_accuracy: 0.0,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.arch.name
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Structural checks: parameter shapes match the arch and running
    /// variances are positive.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{}: {} parameter tensors, arch expects {}",
                self.name(),
                self.params.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::invalid(format!("{}: parameter {name} missing or misshapen", self.name()))),
            }
        }
        let channels = self.arch.bn_channels();
        if channels.len() != self.bn_stats.len() {
            return Err(Error::invalid(format!(
                "{}: {} bn stats for {} batch-norm layers",
                self.name(),
                self.bn_stats.len(),
                channels.len()
            )));
        }
        for (s, c) in self.bn_stats.iter().zip(channels) {
            if s.mean.len() != c || s.var.len() != c {
                return Err(Error::invalid(format!("{}: bn stat {} width", self.name(), s.layer)));
            }
            if s.var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid(format!(
                    "{}: non-positive running variance in layer {}",
                    self.name(),
                    s.layer
                )));
            }
        }
        Ok(())
    }

    /// Loads parameters and running statistics onto `g`. Parameters are
    /// gradient leaves only when `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let params = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.cast(), trainable)))
            .collect();
        let running = self
            .bn_stats
            .iter()
            .map(|s| {
                let m = g.constant(Tensor::from_vec(s.mean.iter().map(|&v| T::from_f64(v as f64)).collect()));
                let v = g.constant(Tensor::from_vec(s.var.iter().map(|&v| T::from_f64(v as f64)).collect()));
                (m, v)
            })
            .collect();
        BoundParams { params, running }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        input: Var,
        mode: Mode,
    ) -> Result<NetOutput> {
        forward_network(g, &self.arch.layers, bound, input, mode)
    }

    fn check_input(&self, images: &Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.arch.input[0] {
            return Err(Error::shape(
                "model input",
                format!("{} expects [N, {}, H, W], got {s:?}", self.name(), self.arch.input[0]),
            ));
        }
        Ok(())
    }

    /// Eval-mode forward over `images` in chunks, returning `(logits, features)`.
    pub fn infer(&self, images: &Tensor<f32>, batch_size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_input(images)?;
        let n = images.shape()[0];
        let bs = batch_size.max(1);
        let mut logits = Vec::with_capacity(n * self.num_classes());
        let mut feats = Vec::with_capacity(n * self.arch.feature_dim);
        let mut g = Graph::<f32>::new();
        for start in (0..n).step_by(bs) {
            let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
            g.reset();
            let bound = self.bind(&mut g, false);
            let x = g.constant(images.select_rows(&idx));
            let out = self.forward(&mut g, &bound, x, Mode::Eval)?;
            logits.extend_from_slice(g.value(out.logits).data());
            feats.extend_from_slice(g.value(out.features).data());
        }
        Ok((
            Tensor::new(vec![n, self.num_classes()], logits)?,
            Tensor::new(vec![n, self.arch.feature_dim], feats)?,
        ))
    }

    pub fn logits(&self, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>> {
        Ok(self.infer(images, batch_size)?.0)
    }

    /// Top-1 accuracy of eval-mode predictions.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize], batch_size: usize) -> Result<f32> {
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::shape("accuracy", "image and label counts differ"));
        }
        let logits = self.logits(images, batch_size)?;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(logits.row(i)) == l)
            .count();
        Ok(correct as f32 / labels.len() as f32)
    }

    /// Exponential running-average update from train-mode batch statistics.
    pub fn update_running_stats(&mut self, g: &Graph<f32>, captures: &[BnCapture]) -> Result<()> {
        if captures.len() != self.bn_stats.len() {
            return Err(Error::invalid(format!(
                "{} captures for {} batch-norm layers",
                captures.len(),
                self.bn_stats.len()
            )));
        }
        for (stat, cap) in self.bn_stats.iter_mut().zip(captures) {
            let m = g.value(cap.mean).data();
            let v = g.value(cap.var).data();
            for c in 0..stat.mean.len() {
                stat.mean[c] = (1.0 - BN_MOMENTUM) * stat.mean[c] + BN_MOMENTUM * m[c];
                stat.var[c] = (1.0 - BN_MOMENTUM) * stat.var[c] + BN_MOMENTUM * v[c];
            }
        }
        Ok(())
    }
}

/// First index of the largest element.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Copies of the running statistics in traversal order.
pub fn extract_bn_stats(model: &TeacherModel) -> Result<Vec<BnStat>> {
    if model.arch.bn_count() == 0 {
        return Err(Error::invalid(format!("architecture {} has no batch-norm layer", model.name())));
    }
    if model.bn_stats.len() != model.arch.bn_count() {
        return Err(Error::invalid(format!("{} is missing batch-norm statistics", model.name())));
    }
    Ok(model.bn_stats.clone())
}
