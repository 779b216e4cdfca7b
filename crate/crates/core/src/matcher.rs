//! Batched detection-to-ground-truth matching.
//!
//! Every stage works on whole `n × m × m̂` tensors: IoUs for all pairs in
//! every image, masking of invalid pairs, then categorization of each
//! detection as ignored (0), FP (1) or TP (2). The only data-dependent step
//! of greedy matching, "a ground truth goes to the highest-scoring detection
//! that claims it", is expressed as a minimum over per-image rank codes.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::error::{Error, Result};
use crate::model::{CategoryMatrix, DetBatch, PaddedGtBatch};

/// IoU between every detection slot and every ground-truth slot, `n × m × m̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCube {
    values: Array3<f64>,
}

impl IouCube {
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// IoU of two boxes under the inclusive-pixel convention.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0]) + 1.0).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1]) + 1.0).max(0.0);
    let area_a = (a[2] - a[0] + 1.0) * (a[3] - a[1] + 1.0);
    let area_b = (b[2] - b[0] + 1.0) * (b[3] - b[1] + 1.0);
    let inter = w * h;
    inter / (area_a + area_b - inter)
}

fn check_batch_len(det: &DetBatch, gt: &PaddedGtBatch) -> Result<()> {
    if det.batch_len() != gt.batch_len() {
        return Err(Error::Shape(format!(
            "detection batch has {} images, ground-truth batch has {}",
            det.batch_len(),
            gt.batch_len()
        )));
    }
    Ok(())
}

fn box_rows(coords: &Array3<f64>) -> Array2<[f64; 4]> {
    let (n, m, _) = coords.dim();
    let mut out = Array2::from_elem((n, m), [0.0; 4]);
    Zip::from(&mut out)
        .and(coords.lanes(Axis(2)))
        .for_each(|b, lane| *b = [lane[0], lane[1], lane[2], lane[3]]);
    out
}

/// All-pairs IoU within each image of the batch.
pub fn pairwise_iou(det: &DetBatch, gt: &PaddedGtBatch) -> Result<IouCube> {
    check_batch_len(det, gt)?;
    let shape = (det.batch_len(), det.slots(), gt.slots());
    let det_boxes = box_rows(det.coords()).insert_axis(Axis(2));
    let gt_boxes = box_rows(gt.coords()).insert_axis(Axis(1));
    let mut values = Array3::<f64>::zeros(shape);
    Zip::from(&mut values)
        .and_broadcast(&det_boxes)
        .and_broadcast(&gt_boxes)
        .for_each(|o, &a, &b| *o = box_iou(a, b));
    Ok(IouCube { values })
}

/// Zeroes IoUs between detections and ground truths of different classes and
/// all IoUs of discarded detections.
///
/// Padded ground-truth slots carry [`crate::model::PAD_LABEL`] and are zeroed
/// by the class test.
pub fn filter_iou(iou: IouCube, det: &DetBatch, gt: &PaddedGtBatch) -> Result<IouCube> {
    check_batch_len(det, gt)?;
    let mut values = iou.values;
    let det_labels = det.labels().view().insert_axis(Axis(2));
    let gt_labels = gt.labels().view().insert_axis(Axis(1));
    let discarded = det.discard_mask().view().insert_axis(Axis(2));
    Zip::from(&mut values)
        .and_broadcast(&det_labels)
        .and_broadcast(&gt_labels)
        .and_broadcast(&discarded)
        .for_each(|o, &l, &l_gt, &m| {
            if l != l_gt || m {
                *o = 0.0;
            }
        });
    Ok(IouCube { values })
}

fn max_iou(values: &Array3<f64>) -> Array2<f64> {
    values.fold_axis(Axis(2), 0.0, |&acc, &v| acc.max(v))
}

/// Marks every detection whose best filtered IoU is at most `t` as FP, then
/// resets discarded detections to ignored.
pub fn categorize_below(iou: &IouCube, det: &DetBatch, t: f64) -> CategoryMatrix {
    let best = max_iou(&iou.values);
    let mut values = best.mapv(|v| u8::from(v <= t));
    Zip::from(&mut values)
        .and(det.discard_mask())
        .for_each(|d, &m| {
            if m {
                *d = 0;
            }
        });
    CategoryMatrix { values }
}

/// Index of the first maximum of every lane along the last axis, with the
/// maximum itself. Empty lanes report `(0, 0.0)`.
fn argmax_last(values: &Array3<f64>) -> (Array2<usize>, Array2<f64>) {
    let (n, m, _) = values.dim();
    let mut idx = Array2::<usize>::zeros((n, m));
    let mut max = Array2::<f64>::zeros((n, m));
    Zip::from(&mut idx)
        .and(&mut max)
        .and(values.lanes(Axis(2)))
        .for_each(|j, v, lane| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, &x) in lane.iter().enumerate() {
                if x > best.1 {
                    best = (k, x);
                }
            }
            if lane.is_empty() {
                best.1 = 0.0;
            }
            *j = best.0;
            *v = best.1;
        });
    (idx, max)
}

/// Ranks detections of every image by score, highest first; equal scores keep
/// their slot order. Row `i` lists slot indices in rank order.
pub fn score_order(scores: &Array2<f64>) -> Array2<usize> {
    let (n, m) = scores.dim();
    let mut order = Array2::from_shape_fn((n, m), |(_, j)| j);
    for (mut row, s) in order.outer_iter_mut().zip(scores.outer_iter()) {
        let idx = row.as_slice_mut().expect("standard layout");
        idx.sort_unstable_by_key(|&j| rank_key(s[j], 0, j));
    }
    order
}

fn gather<T: Copy>(src: &Array2<T>, order: &Array2<usize>) -> Array2<T> {
    let mut out = src.clone();
    Zip::indexed(&mut out).for_each(|(i, r), v| *v = src[[i, order[[i, r]]]]);
    out
}

/// Resolves above-threshold detections into TP and FP.
///
/// IoUs with ignore-masked ground truths (difficult or padded) are zeroed
/// first. Each remaining detection whose best IoU exceeds `t` targets its
/// best ground truth (first maximum); within an image, the highest-ranked
/// detection targeting a ground truth becomes TP and the rest FP. Ranks are
/// encoded as `1..=m` with `sentinel` standing for "no claim", so the winner
/// per ground truth is a minimum along the detection axis. `sentinel` must
/// exceed `m`.
pub fn categorize_above(
    d: CategoryMatrix,
    iou: IouCube,
    det: &DetBatch,
    gt: &PaddedGtBatch,
    t: f64,
    sentinel: usize,
) -> Result<CategoryMatrix> {
    check_batch_len(det, gt)?;
    let (n, m, m_gt) = iou.values.dim();
    if sentinel <= m {
        return Err(Error::Sentinel { sentinel, slots: m });
    }

    let mut values = iou.values;
    let ignore = gt.ignore_mask().view().insert_axis(Axis(1));
    Zip::from(&mut values)
        .and_broadcast(&ignore)
        .for_each(|o, &ig| {
            if ig {
                *o = 0.0;
            }
        });

    let (best_gt, best_iou) = argmax_last(&values);
    let above = best_iou.mapv(|v| v > t);

    let order = score_order(det.scores());
    let mut d_sorted = gather(&d.values, &order);
    let above = gather(&above, &order);
    let best_gt = gather(&best_gt, &order);

    Zip::from(&mut d_sorted).and(&above).for_each(|c, &v| {
        if v {
            *c = 1;
        }
    });

    // claims[i, g, r] = rank code r + 1 if the detection at rank r targets
    // ground truth g, else the sentinel
    let gt_range = Array1::from_iter(0..m_gt).insert_axis(Axis(1));
    let rank_codes = Array1::from_iter(1..=m);
    let mut claims = Array3::<usize>::zeros((n, m_gt, m));
    Zip::from(&mut claims)
        .and_broadcast(best_gt.view().insert_axis(Axis(1)))
        .and_broadcast(above.view().insert_axis(Axis(1)))
        .and_broadcast(&gt_range)
        .and_broadcast(&rank_codes)
        .for_each(|c, &j, &v, &g, &code| *c = if v && j == g { code } else { sentinel });

    let first_claim = claims.fold_axis(Axis(2), sentinel, |&acc, &c| acc.min(c));
    // a rank is TP if it holds the first claim on the ground truth it targets
    let mut tp = Array2::<bool>::from_elem((n, m), false);
    Zip::indexed(&mut tp)
        .and(&above)
        .and(&best_gt)
        .for_each(|(i, r), u, &v, &g| *u = v && first_claim[[i, g]] == r + 1);

    Zip::from(&mut d_sorted).and(&tp).for_each(|c, &u| {
        if u {
            *c = 2;
        }
    });

    let mut values = d.values;
    Zip::indexed(&d_sorted).for_each(|(i, r), &c| values[[i, order[[i, r]]]] = c);
    Ok(CategoryMatrix { values })
}

/// Sentinel used by [`categorize`]: one past the slot count.
pub fn default_sentinel(det: &DetBatch) -> usize {
    det.slots() + 1
}

/// Both categorization stages on an already filtered IoU cube.
pub fn categorize(
    iou: IouCube,
    det: &DetBatch,
    gt: &PaddedGtBatch,
    t: f64,
) -> Result<CategoryMatrix> {
    let d = categorize_below(&iou, det, t);
    categorize_above(d, iou, det, gt, t, default_sentinel(det))
}

/// Full matching of one batch at one threshold.
pub fn match_batch(det: &DetBatch, gt: &PaddedGtBatch, t: f64) -> Result<CategoryMatrix> {
    let iou = filter_iou(pairwise_iou(det, gt)?, det, gt)?;
    categorize(iou, det, gt, t)
}

/// Total order used to rank detections everywhere: higher score first, then
/// lower image index, then lower slot index.
pub fn rank_cmp(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Integer sort key whose ascending order is [`rank_cmp`].
pub fn rank_key(score: f64, image: usize, slot: usize) -> (u64, usize, usize) {
    // same bit trick as f64::total_cmp, mapped to unsigned and reversed
    let bits = score.to_bits() as i64;
    let ordered = (bits ^ ((((bits >> 63) as u64) >> 1) as i64)) as u64 ^ (1 << 63);
    (!ordered, image, slot)
}
