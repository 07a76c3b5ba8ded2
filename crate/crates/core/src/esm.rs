//! Pseudo-labels from the frozen model, the extended semantic map (ESM) and
//! extended per-pixel probabilities.
//!
//! Everything here lives at feature resolution: old-model probabilities are
//! `h × w × T^{k-1}` post-softmax tensors and ground truth has already been
//! downsampled to `h × w`.

use std::fmt::Write as _;

use crate::error::{Result, UcdError};
use crate::numerics::{argmax, dot, DenseTensor};
use crate::tasks::{SemanticMap, BACKGROUND};

const NORMALIZATION_TOL: f64 = 1e-6;

/// Per-pixel distribution over all classes seen through step `k`, shaped
/// `h × w × T^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedProbability {
    pub probs: DenseTensor,
}

impl ExtendedProbability {
    pub fn n_classes(&self) -> usize {
        self.probs.last_dim()
    }

    /// Distribution at flattened pixel `p` (`row * w + col`).
    pub fn pixel(&self, p: usize) -> &[f64] {
        self.probs.lane(p)
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let w = self.probs.shape()[1];
        self.probs.lane(row * w + col)
    }
}

/// ESMs for every image of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EsmBatch {
    pub maps: Vec<SemanticMap>,
}

impl EsmBatch {
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for (n, m) in self.maps.iter().enumerate() {
            let _ = writeln!(s, "# image {n}");
            s.push_str(&m.debug_dump());
        }
        s
    }
}

fn check_probs(probs: &DenseTensor) -> Result<(usize, usize)> {
    if probs.rank() != 3 {
        return Err(UcdError::shape(format!(
            "expected h×w×T probabilities, got {:?}",
            probs.shape()
        )));
    }
    for (p, lane) in probs.lanes().enumerate() {
        let sum: f64 = lane.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || lane.iter().any(|&v| v < 0.0) {
            return Err(UcdError::NotNormalized { pixel: p, sum });
        }
    }
    Ok((probs.shape()[0], probs.shape()[1]))
}

/// Per-pixel argmax of the old model's probabilities (lowest index wins ties).
pub fn pseudo_labels(old_probs: &DenseTensor) -> Result<SemanticMap> {
    let (h, w) = check_probs(old_probs)?;
    SemanticMap::new(h, w, old_probs.lanes().map(argmax).collect())
}

/// Superimposes non-background ground truth on the pseudo-labels.
pub fn build_esm(gt: &SemanticMap, pseudo: &SemanticMap) -> Result<SemanticMap> {
    if gt.dims() != pseudo.dims() {
        return Err(UcdError::shape(format!(
            "gt {:?} vs pseudo {:?}",
            gt.dims(),
            pseudo.dims()
        )));
    }
    let labels = gt
        .labels()
        .iter()
        .zip(pseudo.labels())
        .map(|(&g, &p)| if g != BACKGROUND { g } else { p })
        .collect();
    SemanticMap::new(gt.height(), gt.width(), labels)
}

/// Background-GT pixels copy the old distribution padded with `new_count`
/// zeros; labeled pixels become one-hot at their class.
pub fn extend_probabilities(
    old_probs: &DenseTensor,
    gt: &SemanticMap,
    new_count: usize,
) -> Result<ExtendedProbability> {
    let (h, w) = check_probs(old_probs)?;
    if (h, w) != gt.dims() {
        return Err(UcdError::shape(format!(
            "old probabilities {h}x{w} vs gt {:?}",
            gt.dims()
        )));
    }
    let old_total = old_probs.last_dim();
    let total = old_total + new_count;
    let mut out = DenseTensor::zeros(&[h, w, total]);
    for (p, &g) in gt.labels().iter().enumerate() {
        let dst = out.lane_mut(p);
        if g == BACKGROUND {
            dst[..old_total].copy_from_slice(old_probs.lane(p));
        } else if g < total {
            dst[g] = 1.0;
        } else {
            return Err(UcdError::ClassOutOfRange { class: g, total });
        }
    }
    Ok(ExtendedProbability { probs: out })
}

/// Probability that two pixels share a class: `P̄_a · P̄_g`.
pub fn same_class_probability(pa: &[f64], pg: &[f64]) -> Result<f64> {
    if pa.len() != pg.len() {
        return Err(UcdError::shape(format!(
            "probability vectors of length {} and {}",
            pa.len(),
            pg.len()
        )));
    }
    Ok(dot(pa, pg))
}

/// Runs pseudo-labeling, merging and probability extension imagewise.
pub fn esm_for_batch(
    old_probs: &[DenseTensor],
    gt: &[SemanticMap],
    new_count: usize,
) -> Result<(EsmBatch, Vec<ExtendedProbability>)> {
    if old_probs.len() != gt.len() {
        return Err(UcdError::shape(format!(
            "{} probability maps for {} ground truths",
            old_probs.len(),
            gt.len()
        )));
    }
    let mut maps = Vec::with_capacity(gt.len());
    let mut extended = Vec::with_capacity(gt.len());
    for (probs, g) in old_probs.iter().zip(gt) {
        let pseudo = pseudo_labels(probs)?;
        maps.push(build_esm(g, &pseudo)?);
        extended.push(extend_probabilities(probs, g, new_count)?);
    }
    Ok((EsmBatch { maps }, extended))
}
