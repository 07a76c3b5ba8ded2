//! Intersection-over-union bookkeeping and per-step metric records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UcdError};
use crate::tasks::{SemanticMap, BACKGROUND};

/// `class_count × class_count` confusion counts, rows = ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn accumulate(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(UcdError::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let total = self.class_count;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            for class in [p, g] {
                if class >= total {
                    return Err(UcdError::ClassOutOfRange { class, total });
                }
            }
            self.counts[g * total + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.class_count + pred]
    }

    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let n = self.class_count;
        let tp = self.count(class, class);
        let gt_total: u64 = (0..n).map(|p| self.count(class, p)).sum();
        let pred_total: u64 = (0..n).map(|g| self.count(g, class)).sum();
        let union = gt_total + pred_total - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.class_count).map(|c| self.iou(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a non-empty union.
    pub mean: Option<f64>,
}

/// Mean IoU of `classes`, skipping classes whose IoU is undefined.
pub fn group_mean(per_class: &[Option<f64>], classes: &BTreeSet<usize>) -> Option<f64> {
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|&c| per_class.get(c).copied().flatten())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Dataset-level IoU over paired maps.
pub fn miou(
    preds: &[SemanticMap],
    gts: &[SemanticMap],
    class_count: usize,
    ignore_background: bool,
) -> Result<IouReport> {
    if preds.len() != gts.len() {
        return Err(UcdError::shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(class_count);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    let per_class = cm.per_class_iou();
    let first = if ignore_background { BACKGROUND + 1 } else { BACKGROUND };
    let classes: BTreeSet<usize> = (first..class_count).collect();
    Ok(IouReport {
        mean: group_mean(&per_class, &classes),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub step: usize,
    pub split: String,
    pub n_images: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Contrast pairs `|R|·(|R|+|S|−1)` per batch, in training order.
    pub pair_counts: Vec<usize>,
    /// Batches whose contrastive term had no valid anchor.
    pub empty_contrast_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub epoch: usize,
    pub seconds: f64,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

pub const SUMMARY_HEADER: &str = "method,step,split,miou_old,miou_new,miou_all";

pub fn summary_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.step,
            r.split,
            fmt_metric(r.miou_old),
            fmt_metric(r.miou_new),
            fmt_metric(r.miou_all)
        ));
    }
    out
}
