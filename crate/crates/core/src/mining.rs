//! Anchor/contrast index sets and the chunked pairwise similarity kernel.
//!
//! The contrast list for a batch is `[new features at R] ++ [old features at S]`,
//! where `R` holds the non-background ESM pixels and `S` the pixels whose ESM
//! class is an old (non-background, not current-task) class. Every anchor in
//! `R` is compared against the whole contrast list in one similarity matrix.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, UcdError};
use crate::esm::EsmBatch;
use crate::numerics::{dot, l2_norm, DenseTensor};
use crate::tasks::BACKGROUND;

/// Default number of anchor rows per kernel block.
pub const DEFAULT_CHUNK_ROWS: usize = 256;

/// `(image in batch, row, col)` on the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PixelIndex {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(image: usize, row: usize, col: usize) -> Self {
        Self { image, row, col }
    }
}

impl fmt::Display for PixelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(image {}, row {}, col {})", self.image, self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningOptions {
    /// Drop background pixels from the anchors and old-model contrast.
    /// Turning this off reproduces the unmasked ablation.
    pub exclude_background: bool,
    /// Contrast anchors against old-model features at old-class pixels.
    pub include_old_model_old_classes: bool,
}

impl Default for MiningOptions {
    fn default() -> Self {
        Self {
            exclude_background: true,
            include_old_model_old_classes: true,
        }
    }
}

fn scan(esm: &EsmBatch, mut keep: impl FnMut(usize) -> bool) -> Vec<PixelIndex> {
    let mut out = Vec::new();
    for (n, m) in esm.maps.iter().enumerate() {
        for row in 0..m.height() {
            for col in 0..m.width() {
                if keep(m.get(row, col)) {
                    out.push(PixelIndex::new(n, row, col));
                }
            }
        }
    }
    out
}

/// `R^k`: every non-background ESM pixel, in (image, row, col) order.
pub fn mine_anchors(esm: &EsmBatch) -> Vec<PixelIndex> {
    scan(esm, |l| l != BACKGROUND)
}

/// `S^k`: ESM pixels outside the current task's classes and background.
pub fn mine_old_indices(esm: &EsmBatch, new_classes: &BTreeSet<usize>) -> Vec<PixelIndex> {
    scan(esm, |l| l != BACKGROUND && !new_classes.contains(&l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Positive,
    Negative,
    SelfExcluded,
}

/// Which features a contrast column refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastSource {
    /// New-model feature of anchor `i`.
    New(usize),
    /// Old-model feature of old index `i`.
    Old(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    pub anchors: Vec<PixelIndex>,
    pub old_indices: Vec<PixelIndex>,
    anchor_classes: Vec<usize>,
    old_classes: Vec<usize>,
}

impl ContrastSets {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// `|R| + |S|`.
    pub fn n_contrast(&self) -> usize {
        self.anchors.len() + self.old_indices.len()
    }

    pub fn anchor_class(&self, a: usize) -> usize {
        self.anchor_classes[a]
    }

    pub fn contrast_class(&self, c: usize) -> usize {
        match self.source(c) {
            ContrastSource::New(i) => self.anchor_classes[i],
            ContrastSource::Old(i) => self.old_classes[i],
        }
    }

    pub fn source(&self, c: usize) -> ContrastSource {
        let r = self.anchors.len();
        if c < r {
            ContrastSource::New(c)
        } else {
            ContrastSource::Old(c - r)
        }
    }

    /// Pixel the contrast column was taken from.
    pub fn contrast_pixel(&self, c: usize) -> PixelIndex {
        match self.source(c) {
            ContrastSource::New(i) => self.anchors[i],
            ContrastSource::Old(i) => self.old_indices[i],
        }
    }

    pub fn membership(&self, a: usize, c: usize) -> Membership {
        if c == a {
            Membership::SelfExcluded
        } else if self.anchor_classes[a] == self.contrast_class(c) {
            Membership::Positive
        } else {
            Membership::Negative
        }
    }

    pub fn positives(&self, a: usize) -> Vec<usize> {
        (0..self.n_contrast())
            .filter(|&c| self.membership(a, c) == Membership::Positive)
            .collect()
    }

    pub fn negatives(&self, a: usize) -> Vec<usize> {
        (0..self.n_contrast())
            .filter(|&c| self.membership(a, c) == Membership::Negative)
            .collect()
    }

    /// Materialized `|R| × (|R| + |S|)` membership masks.
    pub fn masks(&self) -> Vec<Vec<Membership>> {
        (0..self.n_anchors())
            .map(|a| (0..self.n_contrast()).map(|c| self.membership(a, c)).collect())
            .collect()
    }

    /// Anchor–contrast pairs entering the loss: `|R| · (|R| + |S| − 1)`.
    pub fn pair_count(&self) -> usize {
        let r = self.anchors.len();
        if r == 0 {
            0
        } else {
            r * (r + self.old_indices.len() - 1)
        }
    }
}

pub fn build_contrast_sets(
    esm: &EsmBatch,
    new_classes: &BTreeSet<usize>,
    options: MiningOptions,
) -> ContrastSets {
    let (anchors, mut old_indices) = if options.exclude_background {
        (mine_anchors(esm), mine_old_indices(esm, new_classes))
    } else {
        (scan(esm, |_| true), scan(esm, |l| !new_classes.contains(&l)))
    };
    if !options.include_old_model_old_classes {
        old_indices.clear();
    }
    let class_of = |p: &PixelIndex| esm.maps[p.image].get(p.row, p.col);
    ContrastSets {
        anchor_classes: anchors.iter().map(class_of).collect(),
        old_classes: old_indices.iter().map(class_of).collect(),
        anchors,
        old_indices,
    }
}

/// Unit-normalized feature rows together with their original norms.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatures {
    pub dim: usize,
    pub units: Vec<f64>,
    pub norms: Vec<f64>,
}

impl UnitFeatures {
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.units[i * self.dim..(i + 1) * self.dim]
    }

    pub fn concat(&self, other: &UnitFeatures) -> UnitFeatures {
        debug_assert!(self.dim == other.dim || other.is_empty() || self.is_empty());
        let mut units = self.units.clone();
        units.extend_from_slice(&other.units);
        let mut norms = self.norms.clone();
        norms.extend_from_slice(&other.norms);
        UnitFeatures {
            dim: self.dim.max(other.dim),
            units,
            norms,
        }
    }
}

fn check_feature_grid(feats: &DenseTensor) -> Result<()> {
    if feats.rank() != 4 {
        return Err(UcdError::shape(format!(
            "expected N×h×w×D features, got {:?}",
            feats.shape()
        )));
    }
    Ok(())
}

/// Feature vector of `feats` (`N × h × w × D`) at `p`.
pub fn feature_at<'a>(feats: &'a DenseTensor, p: &PixelIndex) -> &'a [f64] {
    let s = feats.shape();
    feats.lane((p.image * s[1] + p.row) * s[2] + p.col)
}

/// Gathers and normalizes the features at `indices`; a zero-norm feature is
/// reported with its pixel.
pub fn gather_unit_features(feats: &DenseTensor, indices: &[PixelIndex]) -> Result<UnitFeatures> {
    check_feature_grid(feats)?;
    let s = feats.shape();
    let dim = s[3];
    let mut units = Vec::with_capacity(indices.len() * dim);
    let mut norms = Vec::with_capacity(indices.len());
    for p in indices {
        if p.image >= s[0] || p.row >= s[1] || p.col >= s[2] {
            return Err(UcdError::shape(format!("{p} outside feature grid {s:?}")));
        }
        let v = feature_at(feats, p);
        let n = l2_norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(UcdError::ZeroNormFeature(*p));
        }
        units.extend(v.iter().map(|x| x / n));
        norms.push(n);
    }
    Ok(UnitFeatures { dim, units, norms })
}

/// Dense `rows × cols` cosine-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: usize, c: usize) -> f64 {
        self.data[a * self.cols + c]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.cols..(a + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Option<DenseTensor> {
        DenseTensor::new(vec![self.rows, self.cols], self.data.clone()).ok()
    }
}

/// Row-blocked product of pre-normalized rows; each block of `chunk_rows`
/// anchors fills a disjoint slice of the output.
pub fn similarity_kernel(
    anchors: &UnitFeatures,
    contrast: &UnitFeatures,
    chunk_rows: usize,
) -> SimilarityMatrix {
    let rows = anchors.len();
    let cols = contrast.len();
    let chunk_rows = chunk_rows.max(1);
    let mut data = vec![0.0; rows * cols];
    if cols > 0 {
        data.par_chunks_mut(chunk_rows * cols)
            .enumerate()
            .for_each(|(block, out)| {
                let start = block * chunk_rows;
                for (i, out_row) in out.chunks_exact_mut(cols).enumerate() {
                    let a = anchors.row(start + i);
                    for (c, o) in out_row.iter_mut().enumerate() {
                        *o = dot(a, contrast.row(c)).clamp(-1.0, 1.0);
                    }
                }
            });
    }
    SimilarityMatrix { rows, cols, data }
}

/// Similarities between new features at `R` and the contrast list
/// `[new at R] ++ [old at S]`.
pub fn similarity_matrix(
    new_feats: &DenseTensor,
    old_feats: &DenseTensor,
    sets: &ContrastSets,
    chunk_rows: usize,
) -> Result<SimilarityMatrix> {
    let (anchors, contrast) = contrast_features(new_feats, old_feats, sets)?;
    Ok(similarity_kernel(&anchors, &contrast, chunk_rows))
}

/// Normalized anchor rows and the concatenated contrast rows.
pub fn contrast_features(
    new_feats: &DenseTensor,
    old_feats: &DenseTensor,
    sets: &ContrastSets,
) -> Result<(UnitFeatures, UnitFeatures)> {
    check_feature_grid(new_feats)?;
    check_feature_grid(old_feats)?;
    if !sets.old_indices.is_empty() && new_feats.shape() != old_feats.shape() {
        return Err(UcdError::shape(format!(
            "new features {:?} vs old features {:?}",
            new_feats.shape(),
            old_feats.shape()
        )));
    }
    let anchors = gather_unit_features(new_feats, &sets.anchors)?;
    let old = gather_unit_features(old_feats, &sets.old_indices)?;
    let contrast = anchors.concat(&old);
    Ok((anchors, contrast))
}
