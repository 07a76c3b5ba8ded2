//! Finite-difference certification of every analytic gradient in the crate.
//!
//! Each check draws a random instance, evaluates the loss as a black box at
//! `x ± h e_i`, and compares the central differences with the analytic
//! gradient.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::esm::{esm_for_batch, EsmBatch, ExtendedProbability};
use crate::losses::{
    contrastive_distillation, finite_difference_gradient, max_relative_error, mib_unbiased_ce,
    mib_unbiased_kd, plop_pseudo_ce, pod_loss, ucd_loss, PseudoThresholds,
};
use crate::mining::{build_contrast_sets, ContrastSets, MiningOptions};
use crate::model::{Arch, Segmenter, Upstream};
use crate::numerics::{softmax, Axis, DenseTensor};
use crate::tasks::SemanticMap;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const MAX_REL_ERROR: f64 = 1e-5;
/// Denominator floor of the relative error; gradient entries smaller than
/// this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> DenseTensor {
    let mut t = DenseTensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    t
}

fn random_probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let logits = normal_tensor(rng, shape, 1.5);
    softmax(&logits, Axis(shape.len() - 1)).expect("valid axis")
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_label: usize, bg_rate: f64) -> SemanticMap {
    let labels = (0..h * w)
        .map(|_| {
            if rng.random_bool(bg_rate) {
                0
            } else {
                rng.random_range(1..=max_label)
            }
        })
        .collect();
    SemanticMap::new(h, w, labels).expect("non-empty map")
}

/// A random contrastive instance: features of both models, the ESM-derived
/// sets and extended probabilities for a batch of `n` images.
pub struct ContrastInstance {
    pub new_feats: DenseTensor,
    pub old_feats: DenseTensor,
    pub sets: ContrastSets,
    pub extended: Vec<ExtendedProbability>,
    pub esm: EsmBatch,
    pub new_classes: BTreeSet<usize>,
}

/// Old model knows background + classes 1..=2; the current task adds 3 and 4.
pub fn random_contrast_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    h: usize,
    w: usize,
    dim: usize,
) -> Result<ContrastInstance> {
    let old_total = 3;
    let new_classes: BTreeSet<usize> = [3, 4].into();
    let mut old_probs = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    for _ in 0..n {
        old_probs.push(random_probs(rng, &[h, w, old_total]));
        let gt = random_map(rng, h, w, 2, 0.6);
        // keep only current-task classes in the ground truth
        let labels = gt.labels().iter().map(|&l| if l == 0 { 0 } else { l + 2 }).collect();
        gts.push(SemanticMap::new(h, w, labels)?);
    }
    let (esm, extended) = esm_for_batch(&old_probs, &gts, new_classes.len())?;
    let sets = build_contrast_sets(&esm, &new_classes, MiningOptions::default());
    Ok(ContrastInstance {
        new_feats: normal_tensor(rng, &[n, h, w, dim], 1.0),
        old_feats: normal_tensor(rng, &[n, h, w, dim], 1.0),
        sets,
        extended,
        esm,
        new_classes,
    })
}

fn compare(analytic: &DenseTensor, f: impl Fn(&DenseTensor) -> f64, x: &DenseTensor) -> f64 {
    let numeric = finite_difference_gradient(f, x, FD_STEP);
    max_relative_error(analytic, &numeric, REL_ERROR_FLOOR)
}

fn check_contrast(rng: &mut ChaCha8Rng, uncertainty: bool) -> Result<f64> {
    let inst = random_contrast_instance(rng, 2, 3, 3, 4)?;
    let tau = [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)];
    let eval = |x: &DenseTensor| {
        if uncertainty {
            ucd_loss(x, &inst.old_feats, &inst.sets, &inst.extended, tau)
        } else {
            contrastive_distillation(x, &inst.old_feats, &inst.sets, tau)
        }
    };
    let analytic = eval(&inst.new_feats)?;
    Ok(compare(
        analytic.grad().expect("contrastive losses carry a gradient"),
        |x| eval(x).map(|r| r.value).unwrap_or(f64::NAN),
        &inst.new_feats,
    ))
}

fn check_mib_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let total = 5;
    let old_total = rng.random_range(1..total);
    let logits = normal_tensor(rng, &[3, 3, total], 2.0);
    let gt = random_map(rng, 3, 3, total - 1, 0.4);
    let analytic = mib_unbiased_ce(&logits, &gt, old_total)?;
    Ok(compare(
        analytic.grad().expect("gradient"),
        |x| mib_unbiased_ce(x, &gt, old_total).map(|r| r.value).unwrap_or(f64::NAN),
        &logits,
    ))
}

fn check_mib_kd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let total = 5;
    let old_total = rng.random_range(2..=total);
    let logits = normal_tensor(rng, &[3, 3, total], 2.0);
    let old = random_probs(rng, &[3, 3, old_total]);
    let analytic = mib_unbiased_kd(&logits, &old)?;
    Ok(compare(
        analytic.grad().expect("gradient"),
        |x| mib_unbiased_kd(x, &old).map(|r| r.value).unwrap_or(f64::NAN),
        &logits,
    ))
}

fn check_pod(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shapes = [[4, 4, 3], [4, 4, 2]];
    let new: Vec<DenseTensor> = shapes.iter().map(|s| normal_tensor(rng, s, 1.0)).collect();
    let old: Vec<DenseTensor> = shapes.iter().map(|s| normal_tensor(rng, s, 1.0)).collect();
    let scales = [1, 2];
    let analytic = pod_loss(&new, &old, &scales)?;
    let mut worst: f64 = 0.0;
    for (l, layer) in new.iter().enumerate() {
        let err = compare(
            &analytic.grads[l],
            |x| {
                let mut layers = new.clone();
                layers[l] = x.clone();
                pod_loss(&layers, &old, &scales).map(|r| r.value).unwrap_or(f64::NAN)
            },
            layer,
        );
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_plop(rng: &mut ChaCha8Rng) -> Result<f64> {
    let total = 5;
    let old_total = 3;
    let logits = normal_tensor(rng, &[3, 3, total], 2.0);
    let old = random_probs(rng, &[3, 3, old_total]);
    let gt = random_map(rng, 3, 3, total - 1, 0.6);
    let thresholds = PseudoThresholds::uniform(rng.random_range(0.0..0.7));
    let analytic = plop_pseudo_ce(&logits, &gt, &old, &thresholds)?;
    Ok(compare(
        analytic.grad().expect("gradient"),
        |x| plop_pseudo_ce(x, &gt, &old, &thresholds).map(|r| r.value).unwrap_or(f64::NAN),
        &logits,
    ))
}

/// Checks every parameter tensor of the segmenter against the linear
/// functional `⟨g_h, hidden⟩ + ⟨g_f, features⟩ + ⟨g_l, logits⟩`.
fn check_model(rng: &mut ChaCha8Rng) -> Result<f64> {
    let arch = Arch {
        patch_size: 3,
        in_channels: 3,
        hidden_dim: 5,
        feature_dim: 4,
    };
    let model = Segmenter::new(arch, 3, rng.random())?;
    let image = normal_tensor(rng, &[8, 8, 3], 0.5);
    let stride = 4;
    let gh = normal_tensor(rng, &[2, 2, 5], 1.0);
    let gf = normal_tensor(rng, &[2, 2, 4], 1.0);
    let gl = normal_tensor(rng, &[2, 2, 3], 1.0);
    let objective = |m: &Segmenter| {
        let f = m.forward(&image, stride).expect("valid shapes");
        let dot = |a: &DenseTensor, b: &DenseTensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        dot(&gh, &f.hidden) + dot(&gf, &f.features) + dot(&gl, &f.logits)
    };
    let grads = model.backward(
        &image,
        stride,
        Upstream {
            hidden: Some(&gh),
            features: Some(&gf),
            logits: Some(&gl),
        },
    )?;
    let mut worst: f64 = 0.0;
    for slot in 0..6 {
        let err = compare(
            grads.tensors()[slot],
            |x| {
                let mut m = model.clone();
                *m.params.tensors_mut()[slot] = x.clone();
                objective(&m)
            },
            model.params.tensors()[slot],
        );
        worst = worst.max(err);
    }
    Ok(worst)
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Every loss with an analytic gradient, plus the segmenter backward pass.
pub fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("ucd", |r| check_contrast(r, true)),
        ("cd", |r| check_contrast(r, false)),
        ("mib_seg", check_mib_ce),
        ("mib_kd", check_mib_kd),
        ("pod", check_pod),
        ("plop_pseudo", check_plop),
        ("segmenter_backward", check_model),
    ]
}

/// Runs `instances` random instances of every check.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>> {
    suite()
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let err = check(&mut rng)?;
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            Ok(GradCheckReport {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(7, 20).unwrap() {
            println!("{:20} {:e}", r.name, r.max_rel_error);
            assert!(r.passed(), "{r:?}");
        }
    }
}
