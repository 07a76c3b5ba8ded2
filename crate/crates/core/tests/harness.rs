use std::path::PathBuf;

use ucd::esm::esm_for_batch;
use ucd::harness::run::{datasets, step_plans};
use ucd::harness::train::{batch_objective, evaluate, train_step, training_targets};
use ucd::harness::{compare_report, run, run_experiment, ExperimentConfig, Method};
use ucd::model::{Segmenter, Sgd};
use ucd::numerics::{softmax, Axis};
use ucd::tasks::split_schedule;

fn small(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        n_images: 16,
        n_test_images: 8,
        epochs: 2,
        batch_size: 4,
        ..ExperimentConfig::default()
    }
}

fn shipped_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    ExperimentConfig::from_file(&path).unwrap()
}

#[test]
fn shipped_config_parses_with_reference_weights() {
    let c = shipped_config();
    assert_eq!(c.weights.tau, 0.07);
    assert_eq!(c.weights.lambda_ucd, 0.01);
    assert_eq!(c.weights.lambda_pod, 0.01);
    assert_eq!(c.weights.lambda_kd, 10.0);
    assert_eq!((c.n_images, c.height, c.width, c.n_classes), (64, 16, 16, 4));
    assert_eq!((c.schedule.as_str(), c.batch_size, c.epochs), ("3-1", 8, 20));
}

#[test]
fn zero_learning_rate_leaves_model_untouched() {
    let mut cfg = small(Method::Ft);
    cfg.epochs = 1;
    cfg.lr_first = 0.0;
    cfg.lr_later = 0.0;
    let out = run_experiment(&cfg).unwrap();
    let fresh = Segmenter::new(cfg.arch, 1, cfg.seed).unwrap().expand_classifier(4);
    assert_eq!(out.model, fresh);
    for r in &out.records {
        assert_eq!(r.loss_curve.len(), 1);
        assert!(r.loss_curve[0].is_finite() && r.loss_curve[0] > 0.0);
    }
}

#[test]
fn zero_contrast_weight_reproduces_mib_bit_for_bit() {
    let mib = run_experiment(&small(Method::Mib)).unwrap();
    let mut cfg = small(Method::MibUcd);
    cfg.weights.lambda_ucd = 0.0;
    let ucd = run_experiment(&cfg).unwrap();
    assert_eq!(mib.model, ucd.model);
    for (a, b) in mib.records.iter().zip(&ucd.records) {
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }
}

#[test]
fn every_method_completes_two_steps() {
    for method in Method::ALL {
        let out = run_experiment(&small(method)).unwrap();
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        let expect = if method == Method::Joint { vec![2, 2] } else { vec![1, 1, 2, 2] };
        assert_eq!(steps, expect, "{method}");
        for r in &out.records {
            assert!(r.loss_curve.iter().all(|v| v.is_finite()), "{method}");
            for v in [r.miou_old, r.miou_new, r.miou_all].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let contrast_steps = out.records.iter().filter(|r| !r.pair_counts.is_empty()).count();
        assert_eq!(contrast_steps > 0, method.uses_contrast(), "{method}");
    }
}

#[test]
fn run_writes_metrics_with_required_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::PlopUcd);
    cfg.output = dir.path().join("out");
    run(&cfg).unwrap();
    let metrics = std::fs::read_to_string(cfg.output.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in [
            "method",
            "seed",
            "step",
            "split",
            "per_class_iou",
            "miou_old",
            "miou_new",
            "miou_all",
            "loss_curve",
            "pair_counts",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let csv = std::fs::read_to_string(cfg.output.join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,step,split,miou_old,miou_new,miou_all\n"));
    assert!(csv.contains("plop_ucd,1,test,nan,"));
    assert!(cfg.output.join("timings.jsonl").exists());
    let restored = ExperimentConfig::from_file(&cfg.output.join("config.conf")).unwrap();
    assert_eq!(restored, cfg);
    let model = Segmenter::load(&cfg.output.join("checkpoint")).unwrap();
    assert_eq!(model.n_outputs(), 5);

    let table = compare_report(&[cfg.output.clone()], false).unwrap();
    assert_eq!(table.lines().count(), 5);
    let avg = compare_report(&[cfg.output.join("metrics.jsonl")], true).unwrap();
    assert_eq!(avg.lines().count(), 3);
}

#[test]
fn constant_background_predictor_scores_zero() {
    let cfg = small(Method::Ft);
    let (_, test) = datasets(&cfg).unwrap();
    let plan = &step_plans(&cfg).unwrap()[1];
    let mut model = Segmenter::new(cfg.arch, plan.total, 0).unwrap();
    for t in model.params.tensors_mut() {
        t.scale(0.0);
    }
    model.params.bc.data_mut()[0] = 1.0;
    let idx: Vec<usize> = (0..test.len()).collect();
    let e = evaluate(&model, &test, &idx, plan, cfg.stride, true).unwrap();
    assert_eq!(e.miou_all, Some(0.0));
    assert_eq!(e.miou_old, Some(0.0));
}

/// A fixed step-2 MiB+UCD batch: plan, models and inputs.
fn step_two_batch() -> (ExperimentConfig, ucd::harness::StepPlan, Segmenter, Segmenter, ucd::tasks::Dataset, Vec<usize>) {
    let cfg = small(Method::MibUcd);
    let (train, _) = datasets(&cfg).unwrap();
    let plans = step_plans(&cfg).unwrap();
    let splits = split_schedule(&train, &cfg.build_schedule().unwrap(), cfg.seed).unwrap();
    let mut model = Segmenter::new(cfg.arch, 1, cfg.seed).unwrap().expand_classifier(3);
    train_step(&cfg, &plans[0], &mut model, None, &train, &splits[0], cfg.lr_first).unwrap();
    let expanded = model.expand_classifier(1);
    let idx: Vec<usize> = splits[1].iter().copied().take(4).collect();
    (cfg, plans[1].clone(), model, expanded, train, idx)
}

#[test]
fn gradient_step_decreases_batch_loss() {
    let (cfg, plan, old, model, train, idx) = step_two_batch();
    let frozen = old.freeze();
    let targets = training_targets(&train, &idx, &plan, cfg.stride).unwrap();
    let images: Vec<_> = idx.iter().map(|&i| &train.images[i].pixels).collect();
    let tgts: Vec<_> = targets.iter().collect();
    let base = batch_objective(&cfg, &plan, &model, Some(&frozen), &images, &tgts).unwrap();
    let decreased = [1e-1, 1e-2, 1e-3].iter().any(|&lr| {
        let mut m = model.clone();
        Sgd::new(lr, 0.0, 0.0).step(&mut m, &base.grads).unwrap();
        batch_objective(&cfg, &plan, &m, Some(&frozen), &images, &tgts).unwrap().value < base.value
    });
    assert!(decreased);
}

#[test]
fn pair_count_telemetry_matches_closed_form() {
    let (cfg, plan, old, model, train, idx) = step_two_batch();
    let frozen = old.freeze();
    let targets = training_targets(&train, &idx, &plan, cfg.stride).unwrap();
    let images: Vec<_> = idx.iter().map(|&i| &train.images[i].pixels).collect();
    let tgts: Vec<_> = targets.iter().collect();
    let out = batch_objective(&cfg, &plan, &model, Some(&frozen), &images, &tgts).unwrap();

    let probs: Vec<_> = images
        .iter()
        .map(|img| softmax(&frozen.forward(img, cfg.stride).unwrap().logits, Axis(2)).unwrap())
        .collect();
    let (esm, _) = esm_for_batch(&probs, &targets, plan.new_classes.len()).unwrap();
    let (mut r, mut s) = (0usize, 0usize);
    for m in &esm.maps {
        for &l in m.labels() {
            if l != 0 {
                r += 1;
                if !plan.new_classes.contains(&l) {
                    s += 1;
                }
            }
        }
    }
    assert!(r > 0);
    assert_eq!(out.pair_count, r * (r + s - 1));
}

#[test]
fn frozen_model_is_unchanged_by_training() {
    let (cfg, plan, old, mut model, train, idx) = step_two_batch();
    let frozen = old.freeze();
    let img = &train.images[idx[0]].pixels;
    let before = frozen.forward(img, cfg.stride).unwrap();
    train_step(&cfg, &plan, &mut model, Some(&frozen), &train, &idx, cfg.lr_later).unwrap();
    let after = frozen.forward(img, cfg.stride).unwrap();
    assert_eq!(before.logits, after.logits);
    assert_eq!(before.features, after.features);
    assert_eq!(frozen.model(), &old);
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = ExperimentConfig::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
    assert!(err.to_string().contains("learning_rate"));
}
