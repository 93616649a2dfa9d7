use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{sample_crop, CropParams};
use crate::autodiff::Graph;
use crate::dataset::{RealDataset, Split};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::{self, Domain, StreamRng};
use crate::schedule::LrSchedule;
use crate::tensor::Tensor;
use crate::zoo::TeacherPool;

use super::{
    bn_alignment_loss, prism_objective, sample_assignment, ImageProvenance, ImageStatus, RecoveryConfig,
    SamplingRule, SelectionPolicy, SyntheticDataset, TeacherAssignment,
};

/// Picks `ipc` distinct train-split images per class; image `c * ipc + i`
/// starts from the `i`-th pick of class `c`.
pub fn init_synthetic(real: &RealDataset, ipc: usize, seed: u64) -> Result<SyntheticDataset> {
    if ipc == 0 {
        return Err(Error::invalid("ipc must be positive"));
    }
    let per_class = real.class_indices(Split::Train);
    let mut picks = Vec::with_capacity(real.num_classes * ipc);
    for (class, idx) in per_class.iter().enumerate() {
        if idx.len() < ipc {
            return Err(Error::InsufficientImages {
                class,
                available: idx.len(),
                required: ipc,
            });
        }
        let mut idx = idx.clone();
        idx.shuffle(&mut rng::stream(seed, Domain::Recovery, &[u64::MAX, class as u64]));
        picks.extend_from_slice(&idx[..ipc]);
    }
    Ok(SyntheticDataset {
        images: real.images.select_rows(&picks),
        labels: picks.iter().map(|&i| real.labels[i]).collect(),
        source_ids: picks.iter().map(|&i| real.ids[i]).collect(),
        ipc,
        num_classes: real.num_classes,
        norm_mean: real.norm_mean.clone(),
        norm_std: real.norm_std.clone(),
        provenance: Vec::new(),
    })
}

/// Image indices of IPC slice `ipc_index`, chunked into cross-class batches.
/// A trailing single-image remainder joins the previous batch so that every
/// batch has a defined variance.
pub fn form_cross_class_batches(
    num_classes: usize,
    ipc: usize,
    ipc_index: usize,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if ipc_index >= ipc {
        return Err(Error::invalid(format!("ipc_index {ipc_index} outside 0..{ipc}")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let slice: Vec<usize> = (0..num_classes).map(|c| c * ipc + ipc_index).collect();
    let mut batches: Vec<Vec<usize>> = slice.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    Ok(batches)
}

/// Iteration budget of images in IPC slice `ipc_index`.
pub fn iterations_for(ipc_index: usize, cfg: &RecoveryConfig) -> usize {
    if !cfg.variable_iterations || cfg.ipc <= 1 {
        return cfg.iterations;
    }
    let (lo, hi) = cfg.iter_range_factor;
    let frac = ipc_index as f64 / (cfg.ipc - 1) as f64;
    ((cfg.iterations as f64) * (lo + (hi - lo) * frac)).round().max(1.0) as usize
}

/// Pixels, labels and optimizer state of one cross-class batch.
pub struct PixelBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub adam: AdamState<f32>,
    pub betas: (f64, f64),
    /// Per-channel valid range in normalized units.
    pub bounds: Vec<(f32, f32)>,
}

impl PixelBatch {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, betas: (f64, f64), bounds: Vec<(f32, f32)>) -> Self {
        let adam = AdamState::new(images.numel());
        Self {
            images,
            labels,
            adam,
            betas,
            bounds,
        }
    }

    fn clamp(&mut self) {
        let s = self.images.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (j, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let (lo, hi) = self.bounds[j % c];
            chunk.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub logit: f64,
    /// Unweighted sum of BN terms.
    pub bn: f64,
    pub total: f64,
}

/// One recovery step: crop, objective, backward to pixels, Adam update and
/// clamp.
pub fn prism_step(
    g: &mut Graph<f32>,
    batch: &mut PixelBatch,
    assignment: &TeacherAssignment,
    pool: &TeacherPool,
    crops: &[CropParams],
    lambda: f64,
    lr: f64,
) -> Result<StepLosses> {
    let s = batch.images.shape().to_vec();
    g.reset();
    let x = g.param(batch.images.clone());
    let xc = g.crop_resize(x, crops, s[2], s[3])?;
    let obj = prism_objective(g, xc, &batch.labels, assignment, pool, lambda)?;
    let losses = StepLosses {
        logit: g.value(obj.logit).item()? as f64,
        bn: obj.bn.iter().map(|&b| g.value(b).item().map(f64::from)).sum::<Result<f64>>()?,
        total: g.value(obj.total).item()? as f64,
    };
    let grads = g.backward(obj.total)?;
    let grad = grads.get(x).ok_or_else(|| Error::invalid("pixels received no gradient"))?;
    let hyper = AdamHyper {
        betas: batch.betas,
        ..Default::default()
    };
    adam_step(batch.images.data_mut(), grad.data(), &mut batch.adam, lr, &hyper)?;
    batch.clamp();
    Ok(losses)
}

/// Sum of BN alignment terms of `subset` on uncropped `images`.
fn monitor_bn(g: &mut Graph<f32>, images: &Tensor<f32>, subset: &[usize], pool: &TeacherPool) -> Result<f64> {
    let mut total = 0.0;
    for &id in subset {
        g.reset();
        let x = g.constant(images.clone());
        let l = bn_alignment_loss(g, pool.get(id).unwrap(), x)?;
        total += g.value(l).item()? as f64;
    }
    Ok(total)
}

struct Unit {
    ipc_index: usize,
    batch_index: usize,
    images: Vec<usize>,
}

struct UnitResult {
    images: Tensor<f32>,
    records: Vec<ImageProvenance>,
}

fn crop_stream(seed: u64, class: usize, ipc_index: usize) -> StreamRng {
    rng::stream(seed, Domain::Recovery, &[class as u64, ipc_index as u64, 1])
}

fn run_unit(init: &SyntheticDataset, pool: &TeacherPool, cfg: &RecoveryConfig, unit: &Unit) -> Result<UnitResult> {
    let [_, _, h, w] = *init.images.shape() else {
        return Err(Error::shape("run_recovery", "synthetic images must be NCHW"));
    };
    let labels: Vec<usize> = unit.images.iter().map(|&i| init.labels[i] as usize).collect();
    let mut batch = PixelBatch::new(
        init.images.select_rows(&unit.images),
        labels.clone(),
        cfg.betas,
        crate::dataset::pixel_bounds(&init.norm_mean, &init.norm_std),
    );
    let rule = cfg.sampling_rule();
    let mut assign_rng = rng::stream(cfg.seed, Domain::Recovery, &[unit.ipc_index as u64, unit.batch_index as u64]);
    let mut crop_rngs: Vec<StreamRng> = labels.iter().map(|&c| crop_stream(cfg.seed, c, unit.ipc_index)).collect();
    let first = sample_assignment(pool, &rule, &mut assign_rng)?;
    let iterations = iterations_for(unit.ipc_index, cfg);
    let schedule = LrSchedule::new(cfg.schedule, cfg.lr, iterations)?;

    let mut g = Graph::<f32>::new();
    let bn_loss_start = monitor_bn(&mut g, &batch.images, &first.bn_subset, pool)?;
    let mut assignment = first.clone();
    let mut draws = 1;
    let mut last = StepLosses {
        logit: f64::NAN,
        bn: f64::NAN,
        total: f64::NAN,
    };
    let mut status = ImageStatus::Ok;
    for t in 0..iterations {
        if cfg.policy == SelectionPolicy::Intra && t > 0 {
            assignment = sample_assignment(pool, &rule, &mut assign_rng)?;
            draws += 1;
        }
        let crops: Vec<CropParams> = crop_rngs
            .iter_mut()
            .map(|r| sample_crop(r, h, w, cfg.crop_range, if cfg.flip { 0.5 } else { 0.0 }))
            .collect();
        match prism_step(&mut g, &mut batch, &assignment, pool, &crops, cfg.lambda_bn, schedule.lr(t)?) {
            Ok(l) => last = l,
            Err(Error::NonFinite(op)) => {
                status = ImageStatus::Aborted {
                    reason: format!("non-finite {op} at step {t}"),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let bn_loss_end = monitor_bn(&mut g, &batch.images, &first.bn_subset, pool)?;
    let records = unit
        .images
        .iter()
        .zip(&labels)
        .map(|(&index, &class)| ImageProvenance {
            index,
            class,
            ipc_index: unit.ipc_index,
            batch_index: unit.batch_index,
            source_id: init.source_ids[index],
            assignment: first.clone(),
            policy: cfg.policy,
            assignments_drawn: draws,
            iterations,
            final_logit_loss: last.logit,
            final_bn_loss: last.bn,
            bn_loss_start,
            bn_loss_end,
            status: status.clone(),
        })
        .collect();
    Ok(UnitResult {
        images: batch.images,
        records,
    })
}

/// Runs recovery over every IPC slice on a pool of `cfg.workers` threads.
/// Output depends only on the inputs, never on the worker count.
pub fn run_recovery(real: &RealDataset, pool: &TeacherPool, cfg: &RecoveryConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if pool.num_classes() != real.num_classes {
        return Err(Error::invalid(format!(
            "pool predicts {} classes, dataset has {}",
            pool.num_classes(),
            real.num_classes
        )));
    }
    if real.num_classes < 2 {
        return Err(Error::invalid("recovery needs at least two classes per batch"));
    }
    let mut synth = init_synthetic(real, cfg.ipc, cfg.seed)?;
    let mut units = Vec::new();
    for ipc_index in 0..cfg.ipc {
        for (batch_index, images) in form_cross_class_batches(real.num_classes, cfg.ipc, ipc_index, cfg.batch_size)?
            .into_iter()
            .enumerate()
        {
            units.push(Unit {
                ipc_index,
                batch_index,
                images,
            });
        }
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<UnitResult>> =
        threads.install(|| units.par_iter().map(|u| run_unit(&synth, pool, cfg, u)).collect());

    let m = synth.labels.len();
    let plane: usize = synth.images.shape()[1..].iter().product();
    let mut provenance: Vec<Option<ImageProvenance>> = vec![None; m];
    for (unit, res) in units.iter().zip(results) {
        let res = res?;
        for (row, &index) in unit.images.iter().enumerate() {
            synth.images.data_mut()[index * plane..(index + 1) * plane]
                .copy_from_slice(&res.images.data()[row * plane..(row + 1) * plane]);
        }
        for rec in res.records {
            let i = rec.index;
            provenance[i] = Some(rec);
        }
    }
    synth.provenance = provenance.into_iter().map(|p| p.expect("every image belongs to a unit")).collect();
    let failed = synth.provenance.iter().filter(|p| p.status != ImageStatus::Ok).count();
    if failed * 100 > m {
        return Err(Error::TooManyAborts {
            failed,
            total: m,
            limit: m / 100,
        });
    }
    Ok(synth)
}

impl RecoveryConfig {
    pub fn sampling_rule(&self) -> SamplingRule {
        SamplingRule {
            policy: self.policy,
            coupling: self.coupling,
            align_first: self.align_first,
        }
    }
}
