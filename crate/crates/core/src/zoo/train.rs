use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_crop, CropParams};
use crate::autodiff::{Gradients, Graph};
use crate::dataset::{RealDataset, Split};
use crate::error::{Error, Result};
use crate::layers::{BoundParams, Mode};
use crate::optim::{OptimConfig, OptimKind, ParamOptimizer};
use crate::rng::{self, Domain};
use crate::schedule::{LrSchedule, ScheduleKind};

use super::{ArchSpec, TeacherModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqueezeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Smallest crop area fraction for random resized crops; 1 disables cropping.
    pub min_crop: f32,
    pub flip: bool,
}

impl Default for SqueezeConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 0.01,
            weight_decay: 0.01,
            min_crop: 0.5,
            flip: true,
        }
    }
}

impl SqueezeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("squeeze epochs and batch_size must be positive"));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::invalid(format!("squeeze min_crop {} outside (0, 1]", self.min_crop)));
        }
        Ok(())
    }
}

/// Applies one optimizer step to every parameter that received a gradient.
pub(crate) fn apply_gradients(
    model: &mut TeacherModel,
    opt: &mut ParamOptimizer,
    bound: &BoundParams,
    grads: &mut Gradients<f32>,
    lr: f64,
) -> Result<()> {
    for (name, var) in &bound.params {
        if let Some(grad) = grads.take(*var) {
            let param = model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            opt.step(name, param, &grad, lr)?;
        }
    }
    Ok(())
}

/// Per-image training crops; identity crops when augmentation is off.
pub(crate) fn train_crops<R: rand::Rng>(rng: &mut R, n: usize, h: usize, w: usize, min_crop: f32, flip: bool) -> Vec<CropParams> {
    (0..n)
        .map(|_| {
            if min_crop >= 1.0 {
                let mut c = CropParams::identity(h, w);
                c.flip = flip && rng.random_bool(0.5);
                c
            } else {
                sample_crop(rng, h, w, (min_crop, 1.0), if flip { 0.5 } else { 0.0 })
            }
        })
        .collect()
}

fn diverged(name: &str, epoch: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(op) => Error::Diverged(format!("{name}: non-finite {op} at epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Trains a freshly initialized model on the train split with AdamW and a
/// cosine schedule, accumulating batch-norm running statistics, then records
/// train and held-out accuracy.
pub fn train_teacher(arch: ArchSpec, real: &RealDataset, cfg: &SqueezeConfig, seed: u64) -> Result<TeacherModel> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(Error::Empty("real dataset"));
    }
    if arch.num_classes != real.num_classes {
        return Err(Error::invalid(format!(
            "{} has {} outputs, dataset has {} classes",
            arch.name, arch.num_classes, real.num_classes
        )));
    }
    let (c, h, w) = real.image_dims();
    if c != arch.input[0] {
        return Err(Error::shape("train_teacher", format!("{c}-channel data for {}", arch.name)));
    }
    let mut model = TeacherModel::init(arch, seed)?;
    let mut train = real.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(ScheduleKind::Cosine, cfg.lr, cfg.epochs * steps_per_epoch)?;
    let mut opt = ParamOptimizer::new(OptimConfig {
        kind: OptimKind::AdamW,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut g = Graph::<f32>::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(seed, Domain::Teacher, &[epoch as u64]);
        train.shuffle(&mut r);
        for chunk in train.chunks(cfg.batch_size) {
            // a single-image batch has no batch variance
            if chunk.len() < 2 {
                continue;
            }
            let crops = train_crops(&mut r, chunk.len(), h, w, cfg.min_crop, cfg.flip);
            let labels = real.labels_usize(chunk);
            g.reset();
            let bound = model.bind(&mut g, true);
            let x = g.constant(real.images.select_rows(chunk));
            let run = |g: &mut Graph<f32>| -> Result<_> {
                let x = g.crop_resize(x, &crops, h, w)?;
                let out = model.forward(g, &bound, x, Mode::Train)?;
                let loss = g.cross_entropy(out.logits, &labels)?;
                Ok((out, loss))
            };
            let (out, loss) = run(&mut g).map_err(|e| diverged(&model.arch.name, epoch, step, e))?;
            let mut grads = g.backward(loss)?;
            model.update_running_stats(&g, &out.bn)?;
            let lr = schedule.lr(step)?;
            apply_gradients(&mut model, &mut opt, &bound, &mut grads, lr)?;
            step += 1;
        }
    }
    if model.params.values().any(|t| !t.all_finite()) {
        return Err(Error::Diverged(format!("{}: non-finite parameters after training", model.arch.name)));
    }
    let train_idx = real.indices(Split::Train);
    model.train_accuracy = model.accuracy(&real.images.select_rows(&train_idx), &real.labels_usize(&train_idx), 256)?;
    let val_idx = real.indices(Split::Val);
    if !val_idx.is_empty() {
        model.heldout_accuracy =
            model.accuracy(&real.images.select_rows(&val_idx), &real.labels_usize(&val_idx), 256)?;
    }
    Ok(model)
}
