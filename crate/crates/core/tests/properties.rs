use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ucd::esm::{EsmBatch, ExtendedProbability};
use ucd::gradcheck::random_contrast_instance;
use ucd::losses::{
    contrastive_distillation, cross_entropy, mib_ucd_total, mib_unbiased_ce, mib_unbiased_kd,
    negative_weights, plop_pseudo_ce, plop_ucd_total, pod_loss, ucd_loss, GradTarget, LossWeights,
    PseudoThresholds,
};
use ucd::mining::{build_contrast_sets, similarity_matrix, Membership, MiningOptions};
use ucd::model::{Arch, Segmenter, Upstream};
use ucd::numerics::{softmax, Axis, DenseTensor};
use ucd::tasks::SemanticMap;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let mut t = DenseTensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

fn one_hot_from_esm(esm: &EsmBatch, total: usize) -> Vec<ExtendedProbability> {
    esm.maps
        .iter()
        .map(|m| {
            let mut probs = DenseTensor::zeros(&[m.height(), m.width(), total]);
            for (p, &l) in m.labels().iter().enumerate() {
                probs.lane_mut(p)[l] = 1.0;
            }
            ExtendedProbability { probs }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrast_is_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0, pick in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_contrast_instance(&mut rng, 2, 3, 3, 4).unwrap();
        let n_vectors = inst.new_feats.len() / 4;
        let i = pick.index(n_vectors);
        let mut scaled = inst.new_feats.clone();
        for v in &mut scaled.data_mut()[i * 4..i * 4 + 4] {
            *v *= alpha;
        }
        let mut scaled_old = inst.old_feats.clone();
        for v in &mut scaled_old.data_mut()[i * 4..i * 4 + 4] {
            *v *= alpha;
        }
        let tau = 0.07;
        let cd = contrastive_distillation(&inst.new_feats, &inst.old_feats, &inst.sets, tau).unwrap().value;
        let cd2 = contrastive_distillation(&scaled, &scaled_old, &inst.sets, tau).unwrap().value;
        prop_assert!((cd - cd2).abs() < 1e-10);
        let u = ucd_loss(&inst.new_feats, &inst.old_feats, &inst.sets, &inst.extended, tau).unwrap().value;
        let u2 = ucd_loss(&scaled, &scaled_old, &inst.sets, &inst.extended, tau).unwrap().value;
        prop_assert!((u - u2).abs() < 1e-10);
    }

    #[test]
    fn consistent_one_hots_reduce_ucd_to_cd(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_contrast_instance(&mut rng, 2, 3, 3, 4).unwrap();
        let ext = one_hot_from_esm(&inst.esm, 5);
        for tau in [0.07, 0.5] {
            let cd = contrastive_distillation(&inst.new_feats, &inst.old_feats, &inst.sets, tau).unwrap();
            let u = ucd_loss(&inst.new_feats, &inst.old_feats, &inst.sets, &ext, tau).unwrap();
            prop_assert_eq!(cd.value, u.value);
            prop_assert_eq!(cd.grad(), u.grad());
        }
    }

    #[test]
    fn similarity_is_chunk_invariant(seed in any::<u64>(), chunk in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_contrast_instance(&mut rng, 2, 4, 4, 3).unwrap();
        let a = similarity_matrix(&inst.new_feats, &inst.old_feats, &inst.sets, chunk).unwrap();
        let b = similarity_matrix(&inst.new_feats, &inst.old_feats, &inst.sets, 256).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masks_partition_every_row(labels in prop::collection::vec(0usize..5, 1..30), new_mask in 0u8..16) {
        let esm = EsmBatch { maps: vec![SemanticMap::new(1, labels.len(), labels).unwrap()] };
        let new: BTreeSet<usize> = (1..5).filter(|c| new_mask & (1 << (c - 1)) != 0).collect();
        let sets = build_contrast_sets(&esm, &new, MiningOptions::default());
        let mut pairs = 0;
        for a in 0..sets.n_anchors() {
            let pos = sets.positives(a);
            let neg = sets.negatives(a);
            prop_assert!(pos.iter().all(|c| !neg.contains(c)));
            prop_assert_eq!(pos.len() + neg.len() + 1, sets.n_contrast());
            prop_assert_eq!(sets.membership(a, a), Membership::SelfExcluded);
            pairs += pos.len() + neg.len();
        }
        prop_assert_eq!(pairs, sets.pair_count());
    }

    #[test]
    fn pod_is_nonnegative_and_zero_on_equal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = vec![normal(&mut rng, &[4, 4, 2])];
        let b = vec![normal(&mut rng, &[4, 4, 2])];
        prop_assert!(pod_loss(&a, &b, &[1, 2]).unwrap().value > 0.0);
        prop_assert_eq!(pod_loss(&a, &a, &[1, 2]).unwrap().value, 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Arch { patch_size: 3, in_channels: 3, hidden_dim: 4, feature_dim: 3 };
        let m = Segmenter::new(arch, 3, seed).unwrap();
        let img = normal(&mut rng, &[8, 8, 3]);
        let g1 = normal(&mut rng, &[2, 2, 3]);
        let g2 = normal(&mut rng, &[2, 2, 3]);
        let mut g12 = g1.clone();
        g12.add_scaled(1.0, &g2).unwrap();
        let up = |g| Upstream { hidden: None, features: None, logits: Some(g) };
        let mut sum = m.backward(&img, 4, up(&g1)).unwrap();
        sum.add_scaled(1.0, &m.backward(&img, 4, up(&g2)).unwrap()).unwrap();
        let joint = m.backward(&img, 4, up(&g12)).unwrap();
        for (a, b) in sum.tensors().iter().zip(joint.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expansion_preserves_old_logits(seed in any::<u64>(), extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Segmenter::new(Arch::default(), 3, seed).unwrap();
        let img = normal(&mut rng, &[16, 16, 3]);
        let before = m.forward(&img, 4).unwrap().logits;
        let after = m.expand_classifier(extra).forward(&img, 4).unwrap().logits;
        prop_assert_eq!(after.last_dim(), 3 + extra);
        for p in 0..before.outer_len() {
            prop_assert_eq!(&after.lane(p)[..3], before.lane(p));
            prop_assert!(after.lane(p)[3..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn lower_temperature_sharpens_negative_weights() {
    let sims = [0.9, 0.3, -0.2, 0.5];
    let peak = |tau: f64| negative_weights(&sims, tau).into_iter().fold(0.0, f64::max);
    assert!(peak(1.0) < peak(0.1));
    assert!(peak(0.1) < peak(0.07));
}

fn doubling_check(total: impl Fn(f64) -> f64) {
    let (l0, l1, l2) = (total(0.0), total(0.01), total(0.02));
    assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-12);
}

#[test]
fn composite_totals_are_linear_in_the_contrast_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = random_contrast_instance(&mut rng, 2, 3, 3, 4).unwrap();
    let u = ucd_loss(&inst.new_feats, &inst.old_feats, &inst.sets, &inst.extended, 0.07).unwrap();
    let logits = normal(&mut rng, &[3, 3, 5]);
    let gt = SemanticMap::new(3, 3, (0..9).map(|_| rng.random_range(0..5)).collect()).unwrap();
    let old = softmax(&normal(&mut rng, &[3, 3, 3]), Axis(2)).unwrap();
    let seg = mib_unbiased_ce(&logits, &gt, 3).unwrap();
    let kd = mib_unbiased_kd(&logits, &old).unwrap();
    let pseudo = plop_pseudo_ce(&logits, &gt, &old, &PseudoThresholds::uniform(0.0)).unwrap();
    let pod = pod_loss(&[normal(&mut rng, &[3, 3, 2])], &[normal(&mut rng, &[3, 3, 2])], &[1]).unwrap();
    let with = |lambda_ucd: f64| LossWeights { lambda_ucd, ..LossWeights::default() };
    doubling_check(|l| mib_ucd_total(&seg, &kd, Some(&u), &with(l)).unwrap().value);
    doubling_check(|l| plop_ucd_total(&pseudo, &pod, &[GradTarget::Hidden], Some(&u), &with(l)).unwrap().value);

    let zero = LossWeights { lambda_ucd: 0.0, lambda_kd: 0.0, lambda_pod: 0.0, tau: 0.07 };
    let t = mib_ucd_total(&seg, &kd, Some(&u), &zero).unwrap();
    assert_eq!(t.value, seg.value);
    let t = plop_ucd_total(&pseudo, &pod, &[GradTarget::Hidden], Some(&u), &zero).unwrap();
    assert_eq!(t.value, pseudo.value);

    let defaults = mib_ucd_total(&seg, &kd, Some(&u), &LossWeights::default()).unwrap();
    let expect = seg.value + 10.0 * kd.value + 0.01 * u.value;
    assert!((defaults.value - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_is_unbiased_ce_without_old_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = normal(&mut rng, &[3, 3, 4]);
    let gt = SemanticMap::new(3, 3, (0..9).map(|_| rng.random_range(0..4)).collect()).unwrap();
    assert_eq!(cross_entropy(&logits, &gt).unwrap(), mib_unbiased_ce(&logits, &gt, 1).unwrap());
}
