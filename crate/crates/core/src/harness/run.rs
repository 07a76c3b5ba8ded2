//! Whole incremental runs: data generation, the step loop and output files.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;

use log::info;

use super::config::{ExperimentConfig, Method};
use super::metrics::{summary_csv, MetricsRecord, TimingRecord};
use super::train::{evaluate, train_step, StepLog, StepPlan};
use crate::error::Result;
use crate::model::{FrozenSegmenter, Segmenter};
use crate::tasks::{generate_shapes_dataset_with, split_schedule, Dataset, ShapesParams};

/// Offset between the training and test data seeds.
const TEST_SEED_OFFSET: u64 = 0x5EED_7E57;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    pub model: Segmenter,
}

pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let params = ShapesParams {
        noise_std: cfg.noise_std,
        channels: cfg.arch.in_channels,
    };
    let gen = |seed: u64, n: usize| {
        generate_shapes_dataset_with(seed, n, cfg.height, cfg.width, cfg.n_classes, params)
    };
    Ok((
        gen(cfg.seed, cfg.n_images)?,
        gen(cfg.seed.wrapping_add(TEST_SEED_OFFSET), cfg.n_test_images)?,
    ))
}

/// Step plans in order; joint training is a single plan at the last step
/// over all classes.
pub fn step_plans(cfg: &ExperimentConfig) -> Result<Vec<StepPlan>> {
    let schedule = cfg.build_schedule()?;
    let k_max = schedule.n_steps();
    let plan = |k: usize| {
        let new_classes = schedule.tasks[k - 1].class_ids.clone();
        let old_classes = schedule.seen_classes(k - 1);
        StepPlan {
            step: k,
            label_classes: new_classes.clone(),
            new_classes,
            old_classes,
            old_total: schedule.total_outputs(k - 1),
            total: schedule.total_outputs(k),
        }
    };
    if cfg.method == Method::Joint {
        let mut p = plan(k_max);
        p.label_classes = schedule.seen_classes(k_max);
        return Ok(vec![p]);
    }
    Ok((1..=k_max).map(plan).collect())
}

fn record(
    cfg: &ExperimentConfig,
    plan: &StepPlan,
    split: &str,
    model: &Segmenter,
    data: &Dataset,
    indices: &[usize],
    log: &StepLog,
) -> Result<MetricsRecord> {
    let e = evaluate(model, data, indices, plan, cfg.stride, cfg.ignore_background)?;
    Ok(MetricsRecord {
        method: cfg.method.to_string(),
        seed: cfg.seed,
        step: plan.step,
        split: split.to_string(),
        n_images: indices.len(),
        per_class_iou: e.per_class_iou,
        miou_old: e.miou_old,
        miou_new: e.miou_new,
        miou_all: e.miou_all,
        loss_curve: log.loss_curve.clone(),
        pair_counts: log.pair_counts.clone(),
        empty_contrast_batches: log.empty_contrast_batches,
    })
}

/// Runs every step in memory; writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = datasets(cfg)?;
    let schedule = cfg.build_schedule()?;
    let splits = split_schedule(&train, &schedule, cfg.seed)?;
    let test_all: Vec<usize> = (0..test.len()).collect();
    let plans = step_plans(cfg)?;

    let mut model = Segmenter::new(cfg.arch, plans[0].old_total.max(1), cfg.seed)?;
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for plan in &plans {
        let (old, lr): (Option<FrozenSegmenter>, f64) = if plan.step == 1 || cfg.method == Method::Joint {
            (None, cfg.lr_first)
        } else {
            (Some(model.freeze()), cfg.lr_later)
        };
        model = model.expand_classifier(plan.total - model.n_outputs());
        let train_idx: Vec<usize> = if cfg.method == Method::Joint {
            let mut all: BTreeSet<usize> = BTreeSet::new();
            splits.iter().flatten().for_each(|&i| {
                all.insert(i);
            });
            all.into_iter().collect()
        } else {
            splits[plan.step - 1].clone()
        };
        info!(
            "{} step {}: {} training images, {} outputs",
            cfg.method,
            plan.step,
            train_idx.len(),
            plan.total
        );
        let log = train_step(cfg, plan, &mut model, old.as_ref(), &train, &train_idx, lr)?;
        for (epoch, &seconds) in log.epoch_seconds.iter().enumerate() {
            timings.push(TimingRecord {
                step: plan.step,
                epoch,
                seconds,
            });
        }
        records.push(record(cfg, plan, "train", &model, &train, &train_idx, &log)?);
        records.push(record(cfg, plan, "test", &model, &test, &test_all, &log)?);
    }
    Ok(RunOutput {
        records,
        timings,
        model,
    })
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// Runs and writes `metrics.jsonl`, `summary.csv`, `timings.jsonl`,
/// `config.conf` and the final checkpoint under `cfg.output`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), jsonl(&out.records)?)?;
    fs::write(dir.join("summary.csv"), summary_csv(&out.records))?;
    fs::write(dir.join("timings.jsonl"), jsonl(&out.timings)?)?;
    fs::File::create(dir.join("config.conf"))?.write_all(cfg.to_text().as_bytes())?;
    out.model.save(&dir.join("checkpoint"))?;
    Ok(out)
}

/// Sizes the global rayon pool from `UCD_THREADS`, if set. Returns the
/// thread count in effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var("UCD_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| crate::UcdError::Config(format!("UCD_THREADS={v:?} is not a count")))?;
        // a pool built earlier in the process wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
