//! Naive reference evaluations shared by the integration tests. Nothing here
//! calls into the loss or mining code it is compared against.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ucd::esm::{EsmBatch, ExtendedProbability};
use ucd::numerics::DenseTensor;

pub fn naive_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    uv / (uu.sqrt() * vv.sqrt())
}

pub fn feature(t: &DenseTensor, n: usize, r: usize, c: usize) -> Vec<f64> {
    let d = t.shape()[3];
    (0..d).map(|k| t.get(&[n, r, c, k])).collect()
}

/// `(image, row, col, class)` of every ESM pixel accepted by `keep`.
pub fn scan_pixels(esm: &EsmBatch, keep: impl Fn(usize) -> bool) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (n, m) in esm.maps.iter().enumerate() {
        for r in 0..m.height() {
            for c in 0..m.width() {
                let l = m.get(r, c);
                if keep(l) {
                    out.push((n, r, c, l));
                }
            }
        }
    }
    out
}

/// Triple-loop contrastive distillation; `extended = None` means every
/// positive weight is 1.
pub fn naive_contrast(
    new_feats: &DenseTensor,
    old_feats: &DenseTensor,
    esm: &EsmBatch,
    new_classes: &BTreeSet<usize>,
    extended: Option<&[ExtendedProbability]>,
    tau: f64,
) -> Option<f64> {
    let anchors = scan_pixels(esm, |l| l != 0);
    let olds = scan_pixels(esm, |l| l != 0 && !new_classes.contains(&l));
    // (feature, class, pixel, anchor position if taken from the new model)
    let mut list: Vec<(Vec<f64>, usize, (usize, usize, usize), Option<usize>)> = Vec::new();
    for (i, &(n, r, c, l)) in anchors.iter().enumerate() {
        list.push((feature(new_feats, n, r, c), l, (n, r, c), Some(i)));
    }
    for &(n, r, c, l) in &olds {
        list.push((feature(old_feats, n, r, c), l, (n, r, c), None));
    }
    let weight = |p: (usize, usize, usize), q: (usize, usize, usize)| -> f64 {
        match extended {
            None => 1.0,
            Some(ext) => {
                let a = ext[p.0].at(p.1, p.2);
                let b = ext[q.0].at(q.1, q.2);
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
        }
    };
    let mut total = 0.0;
    let mut valid = 0usize;
    for (i, &(n, r, c, l)) in anchors.iter().enumerate() {
        let fa = feature(new_feats, n, r, c);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (f, cl, px, src) in &list {
            if *src == Some(i) {
                continue;
            }
            let s = naive_cosine(&fa, f) / tau;
            if *cl == l {
                pos.push((s, *px));
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let lse = neg.iter().map(|s| s.exp()).sum::<f64>().ln();
        let mut acc = 0.0;
        for (s, px) in &pos {
            acc += weight((n, r, c), *px) * (s - lse);
        }
        total += -acc / pos.len() as f64;
        valid += 1;
    }
    (valid > 0).then(|| total / valid as f64)
}

/// `−log softmax(z)[t]` per pixel, averaged.
pub fn naive_ce(logits: &DenseTensor, targets: &[usize]) -> f64 {
    let t = logits.last_dim();
    let mut acc = 0.0;
    for (p, &target) in targets.iter().enumerate() {
        let z = &logits.data()[p * t..(p + 1) * t];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        acc -= (z[target].exp() / denom).ln();
    }
    acc / targets.len() as f64
}

/// Local POD embedding straight from its definition.
pub fn naive_pod_embedding(layer: &DenseTensor, scales: &[usize]) -> Vec<f64> {
    let (h, w, ch) = (layer.shape()[0], layer.shape()[1], layer.shape()[2]);
    let mut out = Vec::new();
    for &s in scales {
        for ri in 0..s {
            for ci in 0..s {
                let rows = ri * h / s..(ri + 1) * h / s;
                let cols = ci * w / s..(ci + 1) * w / s;
                for c in cols.clone() {
                    for k in 0..ch {
                        out.push(rows.clone().map(|r| layer.get(&[r, c, k])).sum());
                    }
                }
                for r in rows.clone() {
                    for k in 0..ch {
                        out.push(cols.clone().map(|c| layer.get(&[r, c, k])).sum());
                    }
                }
            }
        }
    }
    out
}

pub fn naive_pod(new: &[DenseTensor], old: &[DenseTensor], scales: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in new.iter().zip(old) {
        let ea = naive_pod_embedding(a, scales);
        let eb = naive_pod_embedding(b, scales);
        acc += ea.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    acc / new.len() as f64
}
