//! Student training on distilled data and top-1 evaluation on real data.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SoftLoss};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::optim::{OptimConfig, OptimKind, ParamOptimizer};
use crate::recovery::SyntheticDataset;
use crate::relabel::SoftLabels;
use crate::rng::{self, Domain};
use crate::schedule::{LrSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::zoo::{apply_gradients, train_crops, ArchSpec, StudentModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Architecture family of the student.
    pub student_arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: ScheduleKind,
    pub zeta: f64,
    pub loss_kind: SoftLoss,
    /// Train against stored soft labels when available; otherwise hard labels.
    pub use_soft_labels: bool,
    /// Augmentation for hard-label training: smallest crop fraction and flip.
    pub min_crop: f32,
    pub flip: bool,
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            student_arch: "convnet-deep".into(),
            epochs: 50,
            batch_size: 50,
            optimizer: OptimKind::AdamW,
            lr: 0.001,
            weight_decay: 0.01,
            momentum: 0.9,
            schedule: ScheduleKind::DecayedCosine,
            zeta: 2.5,
            loss_kind: SoftLoss::Mse,
            use_soft_labels: true,
            min_crop: 0.25,
            flip: true,
            seeds: vec![0, 1, 2],
            eval_batch: 256,
        }
    }
}

impl ValidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("validation epochs and batch_size must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("validation needs at least one seed"));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::invalid(format!("validation min_crop {} outside (0, 1]", self.min_crop)));
        }
        Ok(())
    }
}

/// Real held-out images the student is scored on.
pub struct EvalSet<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh student on synthetic images only.
///
/// With soft labels, each image is replayed under one of its stored relabel
/// crops (view `epoch % views`) and the softmax output is fitted to the stored target with
/// `cfg.loss_kind`. Without them, the student uses cross-entropy on hard
/// labels with random crops and flips.
pub fn train_student(
    synth: &SyntheticDataset,
    soft: Option<&SoftLabels>,
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<(StudentModel, TrainLog)> {
    cfg.validate()?;
    if synth.is_empty() {
        return Err(Error::Empty("synthetic dataset"));
    }
    let s = synth.images.shape().to_vec();
    let (m, h, w) = (s[0], s[2], s[3]);
    if let Some(sl) = soft {
        if sl.views == 0 || sl.targets.shape() != [m * sl.views, synth.num_classes] || sl.crops.len() != m * sl.views {
            return Err(Error::shape(
                "train_student",
                format!("soft labels {:?} for {m} images", sl.targets.shape()),
            ));
        }
    }
    let arch = ArchSpec::family(&cfg.student_arch, synth.num_classes, h)?;
    let mut model = StudentModel::init(arch, rng::stream_seed(seed, Domain::Student, &[0]))?;
    model.seed = seed;
    let labels = synth.labels_usize();
    let steps_per_epoch = m.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.schedule, cfg.lr, cfg.epochs * steps_per_epoch)?.with_zeta(cfg.zeta)?;
    let mut opt = ParamOptimizer::new(OptimConfig {
        kind: cfg.optimizer,
        weight_decay: cfg.weight_decay,
        momentum: cfg.momentum,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..m).collect();
    let mut log = TrainLog::default();
    let mut g = Graph::<f32>::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(seed, Domain::Student, &[1, epoch as u64]);
        order.shuffle(&mut r);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            g.reset();
            let bound = model.bind(&mut g, true);
            let x = g.constant(synth.images.select_rows(chunk));
            let result = (|| -> Result<_> {
                let out_loss;
                match soft {
                    Some(sl) => {
                        let rows: Vec<usize> = chunk.iter().map(|&i| i * sl.views + epoch % sl.views).collect();
                        let crops: Vec<_> = rows.iter().map(|&r| sl.crops[r]).collect();
                        let xc = g.crop_resize(x, &crops, h, w)?;
                        let out = model.forward(&mut g, &bound, xc, Mode::Train)?;
                        out_loss = (g.soft_target_loss(out.logits, &sl.targets.select_rows(&rows), cfg.loss_kind)?, out);
                    }
                    None => {
                        let crops = train_crops(&mut r, chunk.len(), h, w, cfg.min_crop, cfg.flip);
                        let xc = g.crop_resize(x, &crops, h, w)?;
                        let out = model.forward(&mut g, &bound, xc, Mode::Train)?;
                        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                        out_loss = (g.cross_entropy(out.logits, &y)?, out);
                    }
                }
                Ok(out_loss)
            })();
            let (loss, out) = result.map_err(|e| match e {
                Error::NonFinite(op) => Error::Diverged(format!("student seed {seed}: non-finite {op} in epoch {epoch}")),
                other => other,
            })?;
            loss_sum += g.value(loss).item()? as f64;
            batches += 1;
            let mut grads = g.backward(loss)?;
            model.update_running_stats(&g, &out.bn)?;
            apply_gradients(&mut model, &mut opt, &bound, &mut grads, schedule.lr(step)?)?;
            step += 1;
        }
        log.epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    if model.params.values().any(|t| !t.all_finite()) {
        return Err(Error::Diverged(format!("student seed {seed}: non-finite weights")));
    }
    Ok((model, log))
}

/// Top-1 accuracy of eval-mode predictions without augmentation.
pub fn evaluate(model: &StudentModel, set: &EvalSet, batch_size: usize) -> Result<f64> {
    if set.labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(model.accuracy(set.images, set.labels, batch_size)? as f64)
}

/// Identity of the run a report belongs to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: String,
    pub ipc: usize,
    pub k_max: usize,
    pub policy: String,
    pub config_hash: String,
    /// Hash of the synthetic dataset file the students trained on.
    pub synthetic_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub seeds: Vec<u64>,
    /// Accuracy of each successful seed, in `seeds` order.
    pub accuracies: Vec<f64>,
    pub failed_seeds: Vec<(u64, String)>,
    pub mean: f64,
    /// Population standard deviation across successful seeds.
    pub std: f64,
    pub runtime_secs: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "config_hash,variant,ipc,policy,k_max,mean,std,runtime_secs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3}",
            self.meta.config_hash,
            self.meta.variant,
            self.meta.ipc,
            self.meta.policy,
            self.meta.k_max,
            self.mean,
            self.std,
            self.runtime_secs
        )
    }
}

/// Trains one student per seed and aggregates accuracy on `val`. Failed
/// seeds are recorded; the report needs at least one success.
pub fn run_eval_protocol(
    synth: &SyntheticDataset,
    soft: Option<&SoftLabels>,
    val: &EvalSet,
    cfg: &ValidationConfig,
    meta: ReportMeta,
) -> Result<EvalReport> {
    cfg.validate()?;
    let start = Instant::now();
    let soft = if cfg.use_soft_labels { soft } else { None };
    let outcomes: Vec<Result<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (model, _) = train_student(synth, soft, cfg, seed)?;
            evaluate(&model, val, cfg.eval_batch)
        })
        .collect();
    let mut seeds = Vec::new();
    let mut accuracies = Vec::new();
    let mut failed_seeds = Vec::new();
    for (&seed, outcome) in cfg.seeds.iter().zip(outcomes) {
        match outcome {
            Ok(acc) => {
                seeds.push(seed);
                accuracies.push(acc);
            }
            Err(e @ Error::Diverged(_)) => failed_seeds.push((seed, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if accuracies.is_empty() {
        return Err(Error::Diverged(format!("all {} student seeds failed", cfg.seeds.len())));
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalReport {
        meta,
        seeds,
        accuracies,
        failed_seeds,
        mean,
        std,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
