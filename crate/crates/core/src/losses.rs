//! Contrastive distillation losses, the MiB and PLOP loss families, their
//! weighted composites, and a central finite-difference gradient.
//!
//! Every loss returns the quantity to minimize together with its analytic
//! gradient with respect to the new model's outputs (features or logits).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Result, UcdError};
use crate::esm::ExtendedProbability;
use crate::mining::{
    contrast_features, similarity_kernel, ContrastSets, ContrastSource, PixelIndex,
    DEFAULT_CHUNK_ROWS,
};
use crate::numerics::{argmax, cosine_similarity, lse_unchecked, softmax_in_place, DenseTensor};
use crate::tasks::{SemanticMap, BACKGROUND};

/// Loss-term weights and contrast temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ucd: f64,
    pub lambda_kd: f64,
    pub lambda_pod: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ucd: 0.01,
            lambda_kd: 10.0,
            lambda_pod: 0.01,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(UcdError::invalid("tau must be positive"));
        }
        for (name, v) in [
            ("lambda_ucd", self.lambda_ucd),
            ("lambda_kd", self.lambda_kd),
            ("lambda_pod", self.lambda_pod),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(UcdError::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    /// No anchor had both a positive and a negative; the loss is 0.
    NoValidAnchors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// One gradient per differentiated input, each shaped like that input.
    pub grads: Vec<DenseTensor>,
    /// Per-anchor contribution `−1/|G(a)| Σ_g σ_ag L_lc` (contrastive losses only).
    pub per_anchor_terms: Option<Vec<(PixelIndex, f64)>>,
    pub warning: Option<LossWarning>,
}

impl LossResult {
    fn scalar(value: f64, grad: DenseTensor) -> Self {
        Self {
            value,
            grads: vec![grad],
            per_anchor_terms: None,
            warning: None,
        }
    }

    pub fn grad(&self) -> Option<&DenseTensor> {
        self.grads.first()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(UcdError::invalid(format!("tau must be positive, got {tau}")))
    }
}

/// `δ(a, pos)/τ − log Σ_neg exp(δ(a, neg)/τ)`.
pub fn log_contrast(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(UcdError::Empty("negative set"));
    }
    let pos = cosine_similarity(anchor, positive)? / tau;
    let negs = negatives
        .iter()
        .map(|n| cosine_similarity(anchor, n).map(|s| s / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(pos - lse_unchecked(negs.iter().copied()))
}

/// Softmax weights `exp(s/τ) / Σ exp(s'/τ)` over an anchor's negatives.
pub fn negative_weights(similarities: &[f64], tau: f64) -> Vec<f64> {
    let mut w: Vec<f64> = similarities.iter().map(|s| s / tau).collect();
    softmax_in_place(&mut w);
    w
}

/// Contrastive distillation over a batch (`σ ≡ 1`).
pub fn contrastive_distillation(
    new_feats: &DenseTensor,
    old_feats: &DenseTensor,
    sets: &ContrastSets,
    tau: f64,
) -> Result<LossResult> {
    ContrastLoss::new(tau).evaluate(new_feats, old_feats, sets, None)
}

/// Uncertainty-aware contrastive distillation: every positive pair is
/// weighted by `σ_ag = P̄_a · P̄_g`.
pub fn ucd_loss(
    new_feats: &DenseTensor,
    old_feats: &DenseTensor,
    sets: &ContrastSets,
    extended: &[ExtendedProbability],
    tau: f64,
) -> Result<LossResult> {
    ContrastLoss::new(tau).evaluate(new_feats, old_feats, sets, Some(extended))
}

/// Shared engine behind [`contrastive_distillation`] and [`ucd_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ContrastLoss {
    pub tau: f64,
    pub chunk_rows: usize,
}

struct AnchorTerm {
    anchor: usize,
    value: f64,
    /// `∂(anchor value)/∂s_ac` for every contrast column.
    coef: Vec<f64>,
}

impl ContrastLoss {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            chunk_rows: DEFAULT_CHUNK_ROWS,
        }
    }

    pub fn with_chunk_rows(mut self, chunk_rows: usize) -> Self {
        self.chunk_rows = chunk_rows;
        self
    }

    /// Anchors lacking positives or negatives are dropped from the average;
    /// if none remain the value is 0 with [`LossWarning::NoValidAnchors`].
    pub fn evaluate(
        &self,
        new_feats: &DenseTensor,
        old_feats: &DenseTensor,
        sets: &ContrastSets,
        extended: Option<&[ExtendedProbability]>,
    ) -> Result<LossResult> {
        check_tau(self.tau)?;
        let tau = self.tau;
        let (anchors, contrast) = contrast_features(new_feats, old_feats, sets)?;
        let sim = similarity_kernel(&anchors, &contrast, self.chunk_rows);

        let prob_at = |p: &PixelIndex| -> Result<&[f64]> {
            let ext = extended.expect("only called with probabilities");
            let e = ext
                .get(p.image)
                .ok_or_else(|| UcdError::shape(format!("no extended probabilities for {p}")))?;
            Ok(e.at(p.row, p.col))
        };
        if let Some(ext) = extended {
            let width = ext.first().map(|e| e.n_classes());
            if ext.iter().any(|e| Some(e.n_classes()) != width) {
                return Err(UcdError::shape("extended probabilities of differing widths"));
            }
        }

        let m = sets.n_contrast();
        let terms: Vec<Option<AnchorTerm>> = (0..sets.n_anchors())
            .into_par_iter()
            .map(|a| -> Result<Option<AnchorTerm>> {
                let row = sim.row(a);
                let positives = sets.positives(a);
                let negatives = sets.negatives(a);
                if positives.is_empty() || negatives.is_empty() {
                    return Ok(None);
                }
                let lse = lse_unchecked(negatives.iter().map(|&c| row[c] / tau));
                let inv_g = 1.0 / positives.len() as f64;
                let pa = match extended {
                    Some(_) => Some(prob_at(&sets.anchors[a])?),
                    None => None,
                };
                let mut coef = vec![0.0; m];
                let mut acc = 0.0;
                let mut sigma_sum = 0.0;
                for &g in &positives {
                    let sigma = match pa {
                        Some(pa) => {
                            let pg = prob_at(&sets.contrast_pixel(g))?;
                            crate::esm::same_class_probability(pa, pg)?
                        }
                        None => 1.0,
                    };
                    acc += sigma * (row[g] / tau - lse);
                    sigma_sum += sigma;
                    coef[g] = -sigma * inv_g / tau;
                }
                let weight = sigma_sum * inv_g / tau;
                let w = negative_weights(&negatives.iter().map(|&c| row[c]).collect::<Vec<_>>(), tau);
                for (&c, wn) in negatives.iter().zip(w) {
                    coef[c] = weight * wn;
                }
                Ok(Some(AnchorTerm {
                    anchor: a,
                    value: -inv_g * acc,
                    coef,
                }))
            })
            .collect::<Result<Vec<_>>>()?;

        let valid: Vec<&AnchorTerm> = terms.iter().flatten().collect();
        let mut grad = DenseTensor::zeros(new_feats.shape());
        if valid.is_empty() {
            return Ok(LossResult {
                value: 0.0,
                grads: vec![grad],
                per_anchor_terms: Some(Vec::new()),
                warning: Some(LossWarning::NoValidAnchors),
            });
        }
        let scale = 1.0 / valid.len() as f64;
        let value = valid.iter().map(|t| t.value).sum::<f64>() * scale;
        let per_anchor = valid
            .iter()
            .map(|t| (sets.anchors[t.anchor], t.value))
            .collect();

        let d = anchors.dim;
        // anchor side: ∂s_ac/∂f_a = (u_c − s_ac u_a) / ‖f_a‖
        let anchor_grads: Vec<(usize, Vec<f64>)> = valid
            .par_iter()
            .map(|t| {
                let a = t.anchor;
                let ua = anchors.row(a);
                let row = sim.row(a);
                let mut g = vec![0.0; d];
                let mut self_coef = 0.0;
                for (c, &k) in t.coef.iter().enumerate() {
                    if k != 0.0 {
                        for (gi, uc) in g.iter_mut().zip(contrast.row(c)) {
                            *gi += k * uc;
                        }
                        self_coef += k * row[c];
                    }
                }
                let inv = scale / anchors.norms[a];
                for (gi, ui) in g.iter_mut().zip(ua) {
                    *gi = (*gi - self_coef * ui) * inv;
                }
                (a, g)
            })
            .collect();
        // contrast side, new-feature columns only: ∂s_ar/∂f_r = (u_a − s_ar u_r) / ‖f_r‖
        let column_grads: Vec<(usize, Vec<f64>)> = (0..sets.n_anchors())
            .into_par_iter()
            .map(|r| {
                debug_assert_eq!(sets.source(r), ContrastSource::New(r));
                let ur = anchors.row(r);
                let mut g = vec![0.0; d];
                let mut self_coef = 0.0;
                for t in &valid {
                    let k = t.coef[r];
                    if k != 0.0 {
                        for (gi, ua) in g.iter_mut().zip(anchors.row(t.anchor)) {
                            *gi += k * ua;
                        }
                        self_coef += k * sim.get(t.anchor, r);
                    }
                }
                let inv = scale / anchors.norms[r];
                for (gi, ui) in g.iter_mut().zip(ur) {
                    *gi = (*gi - self_coef * ui) * inv;
                }
                (r, g)
            })
            .collect();
        let shape = new_feats.shape().to_vec();
        for (a, g) in anchor_grads.into_iter().chain(column_grads) {
            let p = sets.anchors[a];
            let lane = (p.image * shape[1] + p.row) * shape[2] + p.col;
            for (dst, v) in grad.lane_mut(lane).iter_mut().zip(g) {
                *dst += v;
            }
        }

        Ok(LossResult {
            value,
            grads: vec![grad],
            per_anchor_terms: Some(per_anchor),
            warning: None,
        })
    }
}

fn check_pixels(logits: &DenseTensor, gt: &SemanticMap) -> Result<usize> {
    if logits.rank() < 2 || logits.outer_len() != gt.len() {
        return Err(UcdError::shape(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            gt.dims()
        )));
    }
    Ok(logits.last_dim())
}

/// Unbiased cross-entropy: on background pixels the target probability is
/// the total mass of background and all old classes (`0..old_total`).
/// `old_total` is `T^{k-1}` counting background; `old_total = 1` gives plain
/// cross-entropy.
pub fn mib_unbiased_ce(logits: &DenseTensor, gt: &SemanticMap, old_total: usize) -> Result<LossResult> {
    let total = check_pixels(logits, gt)?;
    if old_total == 0 || old_total > total {
        return Err(UcdError::invalid(format!(
            "old class count {old_total} with {total} outputs"
        )));
    }
    let n = gt.len() as f64;
    let mut grad = DenseTensor::zeros(logits.shape());
    let mut value = 0.0;
    for (p, &label) in gt.labels().iter().enumerate() {
        let z = logits.lane(p);
        let g = grad.lane_mut(p);
        g.copy_from_slice(z);
        softmax_in_place(g);
        let lse_all = lse_unchecked(z.iter().copied());
        if label == BACKGROUND {
            let folded = &z[..old_total];
            let lse_f = lse_unchecked(folded.iter().copied());
            value += lse_all - lse_f;
            for (gj, zj) in g[..old_total].iter_mut().zip(folded) {
                *gj -= (zj - lse_f).exp();
            }
        } else if label < total {
            value += lse_all - z[label];
            g[label] -= 1.0;
        } else {
            return Err(UcdError::ClassOutOfRange { class: label, total });
        }
    }
    grad.scale(1.0 / n);
    Ok(LossResult::scalar(value / n, grad))
}

/// Plain per-pixel cross-entropy against `gt`.
pub fn cross_entropy(logits: &DenseTensor, gt: &SemanticMap) -> Result<LossResult> {
    mib_unbiased_ce(logits, gt, 1)
}

fn check_distribution(probs: &DenseTensor) -> Result<()> {
    for (p, lane) in probs.lanes().enumerate() {
        let sum: f64 = lane.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || lane.iter().any(|&v| v < 0.0) {
            return Err(UcdError::NotNormalized { pixel: p, sum });
        }
    }
    Ok(())
}

/// Unbiased distillation: cross-entropy of the old distribution against the
/// new one, with the new classes' mass folded into background.
pub fn mib_unbiased_kd(logits: &DenseTensor, old_probs: &DenseTensor) -> Result<LossResult> {
    let total = logits.last_dim();
    let old_total = old_probs.last_dim();
    if logits.rank() < 2 || logits.outer_len() != old_probs.outer_len() || old_total > total {
        return Err(UcdError::shape(format!(
            "logits {:?} vs old probabilities {:?}",
            logits.shape(),
            old_probs.shape()
        )));
    }
    check_distribution(old_probs)?;
    let n = logits.outer_len() as f64;
    let mut grad = DenseTensor::zeros(logits.shape());
    let mut value = 0.0;
    let folded = |z: &[f64]| {
        lse_unchecked(std::iter::once(z[0]).chain(z[old_total..].iter().copied()))
    };
    for p in 0..logits.outer_len() {
        let z = logits.lane(p);
        let o = old_probs.lane(p);
        let lse_all = lse_unchecked(z.iter().copied());
        let lse_bg = folded(z);
        let mass: f64 = o.iter().sum();
        value -= o[0] * (lse_bg - lse_all);
        for c in 1..old_total {
            value -= o[c] * (z[c] - lse_all);
        }
        let g = grad.lane_mut(p);
        g.copy_from_slice(z);
        softmax_in_place(g);
        for gj in g.iter_mut() {
            *gj *= mass;
        }
        g[0] -= o[0] * (z[0] - lse_bg).exp();
        for j in old_total..total {
            g[j] -= o[0] * (z[j] - lse_bg).exp();
        }
        for c in 1..old_total {
            g[c] -= o[c];
        }
    }
    grad.scale(1.0 / n);
    Ok(LossResult::scalar(value / n, grad))
}

fn region_bounds(len: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * len / parts, (i + 1) * len / parts)
}

fn pod_check(f: &DenseTensor, scales: &[usize]) -> Result<(usize, usize, usize)> {
    if f.rank() != 3 {
        return Err(UcdError::shape(format!(
            "POD expects h×w×C layers, got {:?}",
            f.shape()
        )));
    }
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    for &s in scales {
        if s == 0 || s > h || s > w {
            return Err(UcdError::invalid(format!("POD scale {s} for a {h}x{w} grid")));
        }
    }
    Ok((h, w, c))
}

/// Local POD embedding of one `h × w × C` layer: for every scale `s` the grid
/// is cut into `s × s` regions; each region contributes, for every column,
/// the channel sums over its rows, then, for every row, the channel sums over
/// its columns.
pub fn local_pod_embedding(layer: &DenseTensor, scales: &[usize]) -> Result<Vec<f64>> {
    let (h, w, c) = pod_check(layer, scales)?;
    let mut out = Vec::new();
    for &s in scales {
        for ri in 0..s {
            let (r0, r1) = region_bounds(h, s, ri);
            for ci in 0..s {
                let (c0, c1) = region_bounds(w, s, ci);
                for col in c0..c1 {
                    let mut acc = vec![0.0; c];
                    for row in r0..r1 {
                        for (a, v) in acc.iter_mut().zip(layer.lane(row * w + col)) {
                            *a += v;
                        }
                    }
                    out.extend(acc);
                }
                for row in r0..r1 {
                    let mut acc = vec![0.0; c];
                    for col in c0..c1 {
                        for (a, v) in acc.iter_mut().zip(layer.lane(row * w + col)) {
                            *a += v;
                        }
                    }
                    out.extend(acc);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`local_pod_embedding`]: spreads an embedding-space vector back
/// onto the grid.
fn local_pod_adjoint(diff: &[f64], shape: &[usize], scales: &[usize]) -> DenseTensor {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut grad = DenseTensor::zeros(shape);
    let mut k = 0;
    for &s in scales {
        for ri in 0..s {
            let (r0, r1) = region_bounds(h, s, ri);
            for ci in 0..s {
                let (c0, c1) = region_bounds(w, s, ci);
                for col in c0..c1 {
                    let d = &diff[k..k + c];
                    for row in r0..r1 {
                        for (g, v) in grad.lane_mut(row * w + col).iter_mut().zip(d) {
                            *g += v;
                        }
                    }
                    k += c;
                }
                for row in r0..r1 {
                    let d = &diff[k..k + c];
                    for col in c0..c1 {
                        for (g, v) in grad.lane_mut(row * w + col).iter_mut().zip(d) {
                            *g += v;
                        }
                    }
                    k += c;
                }
            }
        }
    }
    grad
}

/// `(1/L) Σ_l ‖F_l^new − F_l^old‖²` over Local POD embeddings; one gradient
/// per new layer.
pub fn pod_loss(new_layers: &[DenseTensor], old_layers: &[DenseTensor], scales: &[usize]) -> Result<LossResult> {
    if new_layers.is_empty() || new_layers.len() != old_layers.len() {
        return Err(UcdError::shape(format!(
            "{} new layers vs {} old layers",
            new_layers.len(),
            old_layers.len()
        )));
    }
    if scales.is_empty() {
        return Err(UcdError::Empty("POD scales"));
    }
    let inv_l = 1.0 / new_layers.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(new_layers.len());
    for (new, old) in new_layers.iter().zip(old_layers) {
        if new.shape() != old.shape() {
            return Err(UcdError::shape(format!(
                "POD layer {:?} vs {:?}",
                new.shape(),
                old.shape()
            )));
        }
        let en = local_pod_embedding(new, scales)?;
        let eo = local_pod_embedding(old, scales)?;
        let diff: Vec<f64> = en.iter().zip(&eo).map(|(a, b)| a - b).collect();
        value += diff.iter().map(|d| d * d).sum::<f64>();
        let scaled: Vec<f64> = diff.iter().map(|d| 2.0 * inv_l * d).collect();
        grads.push(local_pod_adjoint(&scaled, new.shape(), scales));
    }
    Ok(LossResult {
        value: value * inv_l,
        grads,
        per_anchor_terms: None,
        warning: None,
    })
}

/// Per-class confidence thresholds for PLOP pseudo-labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoThresholds {
    pub default: f64,
    pub per_class: BTreeMap<usize, f64>,
}

impl PseudoThresholds {
    pub fn uniform(t: f64) -> Self {
        Self {
            default: t,
            per_class: BTreeMap::new(),
        }
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default)
    }
}

/// PLOP pseudo-label cross-entropy. Labeled pixels keep their ground truth;
/// background pixels take the old model's argmax when its probability reaches
/// the class threshold and are ignored otherwise. The sum is scaled by
/// `ν / |I|`, `ν` being the accepted fraction of background pixels (1 when
/// the image has none).
pub fn plop_pseudo_ce(
    logits: &DenseTensor,
    gt: &SemanticMap,
    old_probs: &DenseTensor,
    thresholds: &PseudoThresholds,
) -> Result<LossResult> {
    let total = check_pixels(logits, gt)?;
    if old_probs.outer_len() != gt.len() || old_probs.last_dim() > total {
        return Err(UcdError::shape(format!(
            "old probabilities {:?} vs logits {:?}",
            old_probs.shape(),
            logits.shape()
        )));
    }
    let mut targets = Vec::with_capacity(gt.len());
    let (mut candidates, mut accepted) = (0usize, 0usize);
    for (p, &label) in gt.labels().iter().enumerate() {
        if label != BACKGROUND {
            if label >= total {
                return Err(UcdError::ClassOutOfRange { class: label, total });
            }
            targets.push(Some(label));
            continue;
        }
        candidates += 1;
        let o = old_probs.lane(p);
        let c = argmax(o);
        if o[c] >= thresholds.threshold(c) {
            accepted += 1;
            targets.push(Some(c));
        } else {
            targets.push(None);
        }
    }
    let nu = if candidates == 0 {
        1.0
    } else {
        accepted as f64 / candidates as f64
    };
    let scale = nu / gt.len() as f64;
    let mut grad = DenseTensor::zeros(logits.shape());
    let mut value = 0.0;
    for (p, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let z = logits.lane(p);
        value += lse_unchecked(z.iter().copied()) - z[t];
        let g = grad.lane_mut(p);
        g.copy_from_slice(z);
        softmax_in_place(g);
        g[t] -= 1.0;
        for gj in g.iter_mut() {
            *gj *= scale;
        }
    }
    Ok(LossResult::scalar(value * scale, grad))
}

/// Which model output a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GradTarget {
    Hidden,
    Features,
    Logits,
}

/// Weighted sum of loss terms with gradients merged per model output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub grads: BTreeMap<GradTarget, DenseTensor>,
}

impl TotalLoss {
    /// Adds `weight · term`, routing `term.grads[i]` to `targets[i]`.
    pub fn add(&mut self, weight: f64, term: &LossResult, targets: &[GradTarget]) -> Result<()> {
        if term.grads.len() != targets.len() {
            return Err(UcdError::shape(format!(
                "{} gradients for {} targets",
                term.grads.len(),
                targets.len()
            )));
        }
        self.value += weight * term.value;
        for (g, t) in term.grads.iter().zip(targets) {
            match self.grads.get_mut(t) {
                Some(acc) => acc.add_scaled(weight, g)?,
                None => {
                    let mut g = g.clone();
                    if weight != 1.0 {
                        g.scale(weight);
                    }
                    self.grads.insert(*t, g);
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, target: GradTarget) -> Option<&DenseTensor> {
        self.grads.get(&target)
    }
}

/// `L_seg + λ_kd L_kd + λ_ucd L_ucd`; a missing UCD term counts as zero.
pub fn mib_ucd_total(
    seg: &LossResult,
    kd: &LossResult,
    ucd: Option<&LossResult>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let mut total = TotalLoss::default();
    total.add(1.0, seg, &[GradTarget::Logits])?;
    total.add(weights.lambda_kd, kd, &[GradTarget::Logits])?;
    if let Some(u) = ucd {
        total.add(weights.lambda_ucd, u, &[GradTarget::Features])?;
    }
    Ok(total)
}

/// `L_pseudo + λ_pod L_pod + λ_ucd L_ucd`; `pod_targets` names the model
/// output behind each POD layer.
pub fn plop_ucd_total(
    pseudo: &LossResult,
    pod: &LossResult,
    pod_targets: &[GradTarget],
    ucd: Option<&LossResult>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let mut total = TotalLoss::default();
    total.add(1.0, pseudo, &[GradTarget::Logits])?;
    total.add(weights.lambda_pod, pod, pod_targets)?;
    if let Some(u) = ucd {
        total.add(weights.lambda_ucd, u, &[GradTarget::Features])?;
    }
    Ok(total)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(loss_fn: F, x: &DenseTensor, h: f64) -> DenseTensor
where
    F: Fn(&DenseTensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = DenseTensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = orig - h;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &DenseTensor, numeric: &DenseTensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
