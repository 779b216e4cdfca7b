//! Average precision from precision/recall curves.
//!
//! Three integrators are provided: exact trapezoids over the raw curve
//! (starting from the point `q = 0, p = 1`), the flattened step curve, and
//! the mean interpolated precision at fixed recall levels.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ApMethod, PrCurves};

/// AP of every class at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub method: ApMethod,
    pub iou_threshold: f64,
    /// `None` for classes without easy ground truth; those are left out of
    /// the mean.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub excluded_class_count: usize,
}

impl ApReport {
    /// Builds a report from raw per-class APs, excluding classes whose easy
    /// ground-truth count is zero. With every class excluded the mean is 0.
    pub fn new(
        method: ApMethod,
        iou_threshold: f64,
        class_ap: &[f64],
        easy_gt_counts: &[usize],
    ) -> Self {
        let per_class_ap: Vec<Option<f64>> = class_ap
            .iter()
            .zip(easy_gt_counts)
            .map(|(&ap, &count)| (count > 0).then_some(ap))
            .collect();
        let included: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let map = if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        };
        Self {
            method,
            iou_threshold,
            excluded_class_count: per_class_ap.len() - included.len(),
            per_class_ap,
            map,
        }
    }
}

/// Area under one curve by trapezoids, after prepending `(q = 0, p = 1)`.
pub fn trapezoid_area(precision: &[f64], recall: &[f64]) -> f64 {
    let p = Array1::from_iter(std::iter::once(1.0).chain(precision.iter().copied()));
    let q = Array1::from_iter(std::iter::once(0.0).chain(recall.iter().copied()));
    if p.len() < 2 {
        return 0.0;
    }
    let n = p.len();
    let p_hi = p.slice(ndarray::s![1..]);
    let p_lo = p.slice(ndarray::s![..n - 1]);
    let q_hi = q.slice(ndarray::s![1..]);
    let q_lo = q.slice(ndarray::s![..n - 1]);
    let mut areas = Array1::<f64>::zeros(n - 1);
    Zip::from(&mut areas)
        .and(&p_hi)
        .and(&p_lo)
        .and(&q_hi)
        .and(&q_lo)
        .for_each(|a, &p1, &p0, &q1, &q0| *a = (p1 + p0) * (q1 - q0) / 2.0);
    areas.sum()
}

/// Trapezoid AP of every class.
///
/// Each class integrates over its own detection columns only.
pub fn ap_trapezoid(pr: &PrCurves) -> Vec<f64> {
    pr.class_curves()
        .iter()
        .map(|(p, q)| trapezoid_area(p, q))
        .collect()
}

/// Mean over `levels` of the best precision at recall `≥ level`; a level the
/// curve never reaches contributes 0.
pub fn recall_levels_ap(
    precision: ArrayView1<f64>,
    recall: ArrayView1<f64>,
    levels: &[f64],
) -> f64 {
    if levels.is_empty() {
        return 0.0;
    }
    let levels = ArrayView1::from(levels);
    let mut masked = Array2::<f64>::zeros((precision.len(), levels.len()));
    Zip::from(&mut masked)
        .and_broadcast(precision.insert_axis(Axis(1)))
        .and_broadcast(recall.insert_axis(Axis(1)))
        .and_broadcast(&levels)
        .for_each(|o, &p, &q, &r| *o = if q >= r { p } else { 0.0 });
    let best = masked.fold_axis(Axis(0), 0.0, |&acc: &f64, &v| acc.max(v));
    best.sum() / levels.len() as f64
}

/// Recall-level AP of every class over the full `k × z` rows.
pub fn ap_recall_levels(pr: &PrCurves, levels: &[f64]) -> Vec<f64> {
    pr.precision()
        .outer_iter()
        .zip(pr.recall().outer_iter())
        .map(|(p, q)| recall_levels_ap(p, q, levels))
        .collect()
}

/// Step-curve AP of one class: precision is made non-increasing by a reverse
/// running maximum, then rectangles are summed wherever recall changes.
pub fn ap_step_everypoint(precision: &[f64], recall: &[f64]) -> f64 {
    let mut p = Vec::with_capacity(precision.len() + 2);
    p.push(0.0);
    p.extend_from_slice(precision);
    p.push(0.0);
    let mut q = Vec::with_capacity(recall.len() + 2);
    q.push(0.0);
    q.extend_from_slice(recall);
    q.push(1.0);

    for j in (2..p.len()).rev() {
        p[j - 1] = p[j - 1].max(p[j]);
    }
    (0..q.len() - 1)
        .filter(|&j| q[j + 1] != q[j])
        .map(|j| p[j + 1] * (q[j + 1] - q[j]))
        .sum()
}

/// Step-curve AP of every class.
pub fn ap_step(pr: &PrCurves) -> Vec<f64> {
    pr.class_curves()
        .iter()
        .map(|(p, q)| ap_step_everypoint(p, q))
        .collect()
}

/// Per-class AP of `pr` under `method`.
pub fn class_ap(pr: &PrCurves, method: ApMethod, levels: &[f64]) -> Vec<f64> {
    match method {
        ApMethod::Trapezoid => ap_trapezoid(pr),
        ApMethod::Step => ap_step(pr),
        ApMethod::RecallLevels => ap_recall_levels(pr, levels),
    }
}

/// Mean of the per-threshold mAPs.
pub fn map_over_thresholds(reports: &[ApReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Config("no IoU thresholds to average over".into()));
    }
    Ok(reports.iter().map(|r| r.map).sum::<f64>() / reports.len() as f64)
}

/// Parses `start:stop:step` (inclusive of `stop`) or a comma-separated list.
pub fn parse_recall_levels(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid recall levels {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !step.is_finite() || step <= 0.0 || stop < start {
                return Err(bad());
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize;
            // snapped to 1e-12: 0:1:0.1 yields 0.3, not 0.30000000000000004
            Ok((0..=count)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}
