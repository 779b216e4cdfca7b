//! End-to-end batched evaluation: batches → matching → accumulation → PR → AP.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ap::{class_ap, map_over_thresholds, ApReport};
use crate::error::{Error, Result};
use crate::ingest::{count_easy_gt, make_batch, Dataset};
use crate::matcher::{categorize, filter_iou, pairwise_iou};
use crate::model::{Accumulator, Category, EvalConfig, PrCurves};

/// Wall time per stage, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub parse_ms: f64,
    pub match_ms: f64,
    pub pr_ms: f64,
    pub ap_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub curves: PrCurves,
    pub report: ApReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub thresholds: Vec<ThresholdResult>,
    pub mean_map: f64,
    pub timings: StageTimings,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn batch_starts(dataset: &Dataset, config: &EvalConfig) -> Vec<usize> {
    (0..dataset.len())
        .step_by(config.batch_size.max(1))
        .collect()
}

/// Runs the batches starting at `starts` and returns one accumulator per
/// IoU threshold.
fn accumulate_batches(
    dataset: &Dataset,
    config: &EvalConfig,
    easy: &[usize],
    starts: &[usize],
) -> Result<Vec<Accumulator>> {
    let mut accs: Vec<Accumulator> = config
        .iou_thresholds
        .iter()
        .map(|_| Accumulator::new(easy.to_vec()))
        .collect();
    for &start in starts {
        let end = (start + config.batch_size).min(dataset.len());
        let (det, gt) = make_batch(dataset, config, start, end)?;
        let iou = filter_iou(pairwise_iou(&det, &gt)?, &det, &gt)?;
        let (last, rest) = accs.split_last_mut().expect("config has a threshold");
        for (acc, &t) in rest.iter_mut().zip(&config.iou_thresholds) {
            acc.extract(&categorize(iou.clone(), &det, &gt, t)?, &det);
        }
        let t = config.iou_thresholds[rest.len()];
        last.extract(&categorize(iou, &det, &gt, t)?, &det);
    }
    Ok(accs)
}

/// Processes every batch and returns one accumulator per IoU threshold.
///
/// With `workers > 1` batches are split into contiguous chunks, each folded
/// into a private accumulator on a thread pool and merged afterwards.
pub fn accumulate(
    dataset: &Dataset,
    config: &EvalConfig,
    workers: usize,
) -> Result<Vec<Accumulator>> {
    config.validate()?;
    let easy = count_easy_gt(dataset);
    let starts = batch_starts(dataset, config);
    if workers <= 1 || starts.len() <= 1 {
        return accumulate_batches(dataset, config, &easy, &starts);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let chunk = starts.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Accumulator>>> = pool.install(|| {
        use rayon::prelude::*;
        starts
            .par_chunks(chunk)
            .map(|part| accumulate_batches(dataset, config, &easy, part))
            .collect()
    });

    let mut merged: Vec<Accumulator> = config
        .iou_thresholds
        .iter()
        .map(|_| Accumulator::new(easy.clone()))
        .collect();
    for part in parts {
        merged = merged
            .into_iter()
            .zip(part?)
            .map(|(a, b)| a.merge(b))
            .collect::<Result<_>>()?;
    }
    Ok(merged)
}

/// Batched evaluation of `dataset` at every configured IoU threshold.
pub fn evaluate(dataset: &Dataset, config: &EvalConfig, workers: usize) -> Result<Evaluation> {
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let accs = accumulate(dataset, config, workers)?;
    timings.match_ms = elapsed_ms(start);

    let start = Instant::now();
    let curves: Vec<PrCurves> = accs.iter().map(|a| a.compute_pr(config.epsilon)).collect();
    timings.pr_ms = elapsed_ms(start);

    let start = Instant::now();
    let thresholds: Vec<ThresholdResult> = curves
        .into_iter()
        .zip(&config.iou_thresholds)
        .map(|(curves, &t)| {
            let aps = class_ap(&curves, config.ap_method, &config.recall_levels);
            let report = ApReport::new(config.ap_method, t, &aps, curves.easy_gt_counts());
            ThresholdResult { curves, report }
        })
        .collect();
    let reports: Vec<ApReport> = thresholds.iter().map(|r| r.report.clone()).collect();
    let mean_map = map_over_thresholds(&reports)?;
    timings.ap_ms = elapsed_ms(start);

    Ok(Evaluation {
        thresholds,
        mean_map,
        timings,
    })
}

/// Category of every real detection slot, `[image][slot]`, at threshold `t`.
pub fn categorize_dataset(
    dataset: &Dataset,
    config: &EvalConfig,
    t: f64,
) -> Result<Vec<Vec<Category>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for start in batch_starts(dataset, config) {
        let end = (start + config.batch_size).min(dataset.len());
        let (det, gt) = make_batch(dataset, config, start, end)?;
        let iou = filter_iou(pairwise_iou(&det, &gt)?, &det, &gt)?;
        let d = categorize(iou, &det, &gt, t)?;
        for (i, record) in dataset.detections()[start..end].iter().enumerate() {
            out.push((0..record.len()).map(|j| d.get(i, j)).collect());
        }
    }
    Ok(out)
}
