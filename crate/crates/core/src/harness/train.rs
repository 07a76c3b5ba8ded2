//! One incremental step: batch objectives, the epoch loop and evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Method};
use super::metrics::{group_mean, ConfusionMatrix};
use crate::error::{Result, UcdError};
use crate::esm::esm_for_batch;
use crate::losses::{
    cross_entropy, mib_unbiased_ce, mib_unbiased_kd, plop_pseudo_ce, pod_loss, ContrastLoss,
    GradTarget, LossWarning, TotalLoss,
};
use crate::mining::build_contrast_sets;
use crate::model::{FrozenSegmenter, Params, Segmenter, Sgd, Upstream};
use crate::numerics::{argmax_last_axis, softmax, Axis, DenseTensor};
use crate::tasks::{downsample_labels, relabel_keep, Dataset, SemanticMap};

/// What one training step sees: its label space and the class groups.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// 1-based step index.
    pub step: usize,
    /// Classes kept in the training labels; everything else is background.
    pub label_classes: BTreeSet<usize>,
    /// Classes introduced by this step (`Y^k`).
    pub new_classes: BTreeSet<usize>,
    /// Foreground classes learned before this step.
    pub old_classes: BTreeSet<usize>,
    /// Outputs of the old model, background included (`T^{k-1}`).
    pub old_total: usize,
    /// Outputs of the current model (`T^k`).
    pub total: usize,
}

impl StepPlan {
    pub fn seen_classes(&self) -> BTreeSet<usize> {
        self.old_classes.union(&self.new_classes).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub value: f64,
    pub grads: Params,
    pub pair_count: usize,
    pub no_valid_anchors: bool,
}

struct ImageTerms {
    total: TotalLoss,
    features: DenseTensor,
    old_features: Option<DenseTensor>,
    old_probs: Option<DenseTensor>,
}

fn image_terms(
    cfg: &ExperimentConfig,
    plan: &StepPlan,
    model: &Segmenter,
    old: Option<&FrozenSegmenter>,
    image: &DenseTensor,
    target: &SemanticMap,
) -> Result<ImageTerms> {
    let fwd = model.forward(image, cfg.stride)?;
    let old_fwd = old.map(|o| o.forward(image, cfg.stride)).transpose()?;
    let old_probs = old_fwd
        .as_ref()
        .map(|f| softmax(&f.logits, Axis(2)))
        .transpose()?;
    let mut total = TotalLoss::default();
    match (cfg.method, &old_fwd, &old_probs) {
        (Method::Mib | Method::MibUcd, Some(_), Some(probs)) => {
            let seg = mib_unbiased_ce(&fwd.logits, target, plan.old_total)?;
            let kd = mib_unbiased_kd(&fwd.logits, probs)?;
            total.add(1.0, &seg, &[GradTarget::Logits])?;
            total.add(cfg.weights.lambda_kd, &kd, &[GradTarget::Logits])?;
        }
        (Method::Plop | Method::PlopUcd, Some(of), Some(probs)) => {
            let pseudo = plop_pseudo_ce(&fwd.logits, target, probs, &cfg.plop_thresholds)?;
            let pod = pod_loss(
                &[fwd.hidden.clone(), fwd.features.clone()],
                &[of.hidden.clone(), of.features.clone()],
                &cfg.pod_scales,
            )?;
            total.add(1.0, &pseudo, &[GradTarget::Logits])?;
            total.add(
                cfg.weights.lambda_pod,
                &pod,
                &[GradTarget::Hidden, GradTarget::Features],
            )?;
        }
        _ => {
            let ce = cross_entropy(&fwd.logits, target)?;
            total.add(1.0, &ce, &[GradTarget::Logits])?;
        }
    }
    Ok(ImageTerms {
        total,
        features: fwd.features,
        old_features: old_fwd.map(|f| f.features),
        old_probs,
    })
}

/// Loss and parameter gradient of one batch. Pixel-wise terms are averaged
/// over images; the contrastive term is computed over the whole batch.
pub fn batch_objective(
    cfg: &ExperimentConfig,
    plan: &StepPlan,
    model: &Segmenter,
    old: Option<&FrozenSegmenter>,
    images: &[&DenseTensor],
    targets: &[&SemanticMap],
) -> Result<BatchOutcome> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(UcdError::shape(format!(
            "{} images for {} targets",
            images.len(),
            targets.len()
        )));
    }
    let n = images.len();
    let mut terms = images
        .par_iter()
        .zip(targets.par_iter())
        .map(|(img, tgt)| image_terms(cfg, plan, model, old, img, tgt))
        .collect::<Result<Vec<_>>>()?;

    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    for t in &mut terms {
        value += t.total.value * inv_n;
        for g in t.total.grads.values_mut() {
            g.scale(inv_n);
        }
    }

    let mut pair_count = 0;
    let mut no_valid_anchors = false;
    let lambda = cfg.weights.lambda_ucd;
    if cfg.method.uses_contrast() && old.is_some() && lambda != 0.0 {
        let new_feats =
            DenseTensor::stack(&terms.iter().map(|t| t.features.clone()).collect::<Vec<_>>())?;
        let old_feats = DenseTensor::stack(
            &terms
                .iter()
                .map(|t| t.old_features.clone().expect("old model present"))
                .collect::<Vec<_>>(),
        )?;
        let old_probs: Vec<DenseTensor> = terms
            .iter()
            .map(|t| t.old_probs.clone().expect("old model present"))
            .collect();
        let gts: Vec<SemanticMap> = targets.iter().map(|t| (*t).clone()).collect();
        let (esm, extended) = esm_for_batch(&old_probs, &gts, plan.new_classes.len())?;
        let sets = build_contrast_sets(&esm, &plan.new_classes, cfg.mining_options());
        pair_count = sets.pair_count();
        let engine = ContrastLoss::new(cfg.weights.tau).with_chunk_rows(cfg.chunk_rows);
        let probs = cfg.method.uses_uncertainty().then_some(extended.as_slice());
        let result = engine.evaluate(&new_feats, &old_feats, &sets, probs)?;
        no_valid_anchors = result.warning == Some(LossWarning::NoValidAnchors);
        value += lambda * result.value;
        if let Some(g) = result.grad() {
            for (t, slice) in terms.iter_mut().zip(g.unstack()) {
                match t.total.grads.get_mut(&GradTarget::Features) {
                    Some(acc) => acc.add_scaled(lambda, &slice)?,
                    None => {
                        let mut s = slice;
                        s.scale(lambda);
                        t.total.grads.insert(GradTarget::Features, s);
                    }
                }
            }
        }
    }

    let per_image = images
        .par_iter()
        .zip(terms.par_iter())
        .map(|(img, t)| {
            model.backward(
                img,
                cfg.stride,
                Upstream {
                    hidden: t.total.grad(GradTarget::Hidden),
                    features: t.total.grad(GradTarget::Features),
                    logits: t.total.grad(GradTarget::Logits),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = model.params.zeros_like();
    for g in &per_image {
        grads.add_scaled(1.0, g)?;
    }
    Ok(BatchOutcome {
        value,
        grads,
        pair_count,
        no_valid_anchors,
    })
}

/// Per-step training telemetry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepLog {
    pub loss_curve: Vec<f64>,
    pub pair_counts: Vec<usize>,
    pub empty_contrast_batches: usize,
    pub epoch_seconds: Vec<f64>,
}

impl StepLog {
    pub fn mean_pair_count(&self) -> f64 {
        if self.pair_counts.is_empty() {
            0.0
        } else {
            self.pair_counts.iter().sum::<usize>() as f64 / self.pair_counts.len() as f64
        }
    }

    pub fn max_pair_count(&self) -> usize {
        self.pair_counts.iter().copied().max().unwrap_or(0)
    }
}

/// Ground truth for `plan` at feature resolution.
pub fn training_targets(
    data: &Dataset,
    indices: &[usize],
    plan: &StepPlan,
    stride: usize,
) -> Result<Vec<SemanticMap>> {
    indices
        .iter()
        .map(|&i| downsample_labels(&relabel_keep(&data.images[i].labels, &plan.label_classes), stride))
        .collect()
}

/// Trains `model` in place for `cfg.epochs` epochs over `indices`.
pub fn train_step(
    cfg: &ExperimentConfig,
    plan: &StepPlan,
    model: &mut Segmenter,
    old: Option<&FrozenSegmenter>,
    data: &Dataset,
    indices: &[usize],
    lr: f64,
) -> Result<StepLog> {
    let mut log = StepLog::default();
    if indices.is_empty() {
        warn!("step {}: no training images", plan.step);
        return Ok(log);
    }
    let targets = training_targets(data, indices, plan, cfg.stride)?;
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(plan.step as u64);
    let mut sgd = Sgd::new(lr, cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&DenseTensor> =
                chunk.iter().map(|&j| &data.images[indices[j]].pixels).collect();
            let tgts: Vec<&SemanticMap> = chunk.iter().map(|&j| &targets[j]).collect();
            let out = batch_objective(cfg, plan, model, old, &images, &tgts)?;
            if !out.value.is_finite() || !out.grads.is_finite() {
                return Err(UcdError::invalid(format!(
                    "non-finite loss at step {} epoch {epoch}",
                    plan.step
                )));
            }
            if cfg.method.uses_contrast() && old.is_some() {
                log.pair_counts.push(out.pair_count);
                if out.no_valid_anchors {
                    log.empty_contrast_batches += 1;
                }
            }
            sgd.step(model, &out.grads)?;
            epoch_loss += out.value;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        debug!("step {} epoch {epoch}: loss {mean:.6}", plan.step);
        log.loss_curve.push(mean);
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if log.empty_contrast_batches > 0 {
        warn!(
            "step {}: {} batches had no valid contrastive anchor",
            plan.step, log.empty_contrast_batches
        );
    }
    Ok(log)
}

/// Per-pixel predictions at image resolution (nearest-neighbour upsampling
/// of the logit grid).
pub fn predict(model: &Segmenter, image: &DenseTensor, stride: usize) -> Result<SemanticMap> {
    let fwd = model.forward(image, stride)?;
    let (gh, gw) = (fwd.logits.shape()[0], fwd.logits.shape()[1]);
    let cells = argmax_last_axis(&fwd.logits)?;
    let (h, w) = (gh * stride, gw * stride);
    let labels = (0..h * w)
        .map(|p| cells[(p / w / stride) * gw + (p % w) / stride])
        .collect();
    SemanticMap::new(h, w, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

/// IoU of `model` on `indices`; classes not yet seen count as background.
pub fn evaluate(
    model: &Segmenter,
    data: &Dataset,
    indices: &[usize],
    plan: &StepPlan,
    stride: usize,
    ignore_background: bool,
) -> Result<Evaluation> {
    let seen = plan.seen_classes();
    let pairs = indices
        .par_iter()
        .map(|&i| {
            let img = &data.images[i];
            Ok((predict(model, &img.pixels, stride)?, relabel_keep(&img.labels, &seen)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(plan.total);
    for (pred, gt) in &pairs {
        cm.accumulate(pred, gt)?;
    }
    let per_class_iou = cm.per_class_iou();
    let mut all = seen;
    if !ignore_background {
        all.insert(crate::tasks::BACKGROUND);
    }
    Ok(Evaluation {
        miou_old: group_mean(&per_class_iou, &plan.old_classes),
        miou_new: group_mean(&per_class_iou, &plan.new_classes),
        miou_all: group_mean(&per_class_iou, &all),
        per_class_iou,
    })
}
