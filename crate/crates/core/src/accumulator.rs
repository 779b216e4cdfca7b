//! Folding categorized batches into a global store and turning it into
//! per-class precision/recall curves.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Zip};

use crate::error::{Error, Result};
use crate::matcher::rank_key;
use crate::model::{Accumulator, CategoryMatrix, DetBatch, PrCurves};

impl Accumulator {
    /// Appends every TP and FP of a categorized batch; ignored slots are
    /// skipped.
    pub fn extract(&mut self, d: &CategoryMatrix, det: &DetBatch) {
        let first = det.first_image();
        Zip::indexed(d.values())
            .and(det.labels())
            .and(det.scores())
            .for_each(|(i, j), &code, &label, &score| {
                if code > 0 {
                    self.labels.push(label);
                    self.scores.push(score);
                    self.tp_flags.push(code == 2);
                    self.image_index.push(first + i);
                    self.det_index.push(j);
                }
            });
    }

    /// Concatenates two stores built from disjoint batches of one dataset.
    pub fn merge(mut self, other: Accumulator) -> Result<Accumulator> {
        if self.easy_gt_counts != other.easy_gt_counts {
            return Err(Error::AccumulatorMismatch(format!(
                "easy ground-truth counts differ ({:?} vs {:?})",
                self.easy_gt_counts, other.easy_gt_counts
            )));
        }
        self.labels.extend(other.labels);
        self.scores.extend(other.scores);
        self.tp_flags.extend(other.tp_flags);
        self.image_index.extend(other.image_index);
        self.det_index.extend(other.det_index);
        Ok(self)
    }

    /// Global ranking of the stored detections: score descending, then image
    /// index, then slot index. Keys are unique, so the order is total.
    pub fn ranked_order(&self) -> Vec<usize> {
        let mut keys: Vec<((u64, usize, usize), usize)> = (0..self.len())
            .map(|i| {
                (
                    rank_key(self.scores[i], self.image_index[i], self.det_index[i]),
                    i,
                )
            })
            .collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| k.1).collect()
    }

    /// Precision and recall of every class at every ranked detection.
    ///
    /// Row `c` holds the running TP/FP counts of class `c` over the global
    /// ranking, so columns of other classes repeat the previous value.
    /// Classes with no easy ground truth get an all-zero recall row.
    pub fn compute_pr(&self, epsilon: f64) -> PrCurves {
        let k = self.num_classes();
        let order = self.ranked_order();
        let labels: Vec<usize> = order.iter().map(|&i| self.labels[i]).collect();
        let tp: Vec<bool> = order.iter().map(|&i| self.tp_flags[i]).collect();
        let z = labels.len();

        let mut precision = Array2::<f64>::zeros((k, z));
        let mut recall = Array2::<f64>::zeros((k, z));
        let mut tp_totals = vec![0usize; k];
        let mut fp_totals = vec![0usize; k];
        // one row per class: cumsum of U = L & tp and V = L & !tp
        Zip::indexed(precision.rows_mut())
            .and(recall.rows_mut())
            .and(ArrayViewMut1::from(&mut tp_totals[..]))
            .and(ArrayViewMut1::from(&mut fp_totals[..]))
            .and(ArrayView1::from(&self.easy_gt_counts))
            .for_each(|class, mut p_row, mut q_row, tp_total, fp_total, &easy| {
                let p_row = p_row.as_slice_mut().expect("standard layout");
                let q_row = q_row.as_slice_mut().expect("standard layout");
                let easy = easy as f64;
                let (mut u, mut v) = (0u32, 0u32);
                let (mut p, mut q) = (0.0, 0.0);
                for j in 0..z {
                    if labels[j] == class {
                        if tp[j] {
                            u += 1;
                        } else {
                            v += 1;
                        }
                        let uf = f64::from(u);
                        p = uf / (uf + f64::from(v)).max(epsilon);
                        q = if easy > 0.0 { uf / easy } else { 0.0 };
                    }
                    p_row[j] = p;
                    q_row[j] = q;
                }
                *tp_total = u as usize;
                *fp_total = v as usize;
            });

        PrCurves {
            precision,
            recall,
            tp_totals,
            fp_totals,
            column_class: labels,
            easy_gt_counts: self.easy_gt_counts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Category;
    use ndarray::array;

    fn batch(labels: Array2<usize>, scores: Array2<f64>, first_image: usize) -> DetBatch {
        let (n, m) = labels.dim();
        DetBatch {
            coords: ndarray::Array3::zeros((n, m, 4)),
            labels,
            scores,
            discard_mask: Array2::from_elem((n, m), false),
            first_image,
        }
    }

    #[test]
    fn extract_skips_ignored_and_lowers_codes() {
        let det = batch(array![[0, 0, 1]], array![[0.9, 0.8, 0.7]], 0);
        let d = CategoryMatrix {
            values: array![[2, 1, 0]],
        };
        let mut acc = Accumulator::new(vec![1, 1]);
        acc.extract(&d, &det);
        assert_eq!(acc.labels(), &[0, 0]);
        assert_eq!(acc.scores(), &[0.9, 0.8]);
        assert_eq!(acc.tp_flags(), &[true, false]);
    }

    #[test]
    fn all_ignored_batch_leaves_store_unchanged() {
        let det = batch(array![[0, 1]], array![[0.9, 0.8]], 0);
        let d = CategoryMatrix {
            values: Array2::zeros((1, 2)),
        };
        let mut acc = Accumulator::new(vec![1, 1]);
        acc.extract(&d, &det);
        assert!(acc.is_empty());
        let pr = acc.compute_pr(1e-9);
        assert_eq!(pr.len(), 0);
        assert_eq!(pr.precision().dim(), (2, 0));
    }

    #[test]
    fn tp_then_fp_gives_half_precision() {
        let det = batch(array![[0, 0]], array![[0.9, 0.8]], 0);
        let d = CategoryMatrix {
            values: array![[2, 1]],
        };
        let mut acc = Accumulator::new(vec![1]);
        acc.extract(&d, &det);
        let pr = acc.compute_pr(1e-9);
        assert_eq!(pr.class_curve(0), (vec![1.0, 0.5], vec![1.0, 1.0]));
        assert_eq!(pr.tp_total(0), 1);
        assert_eq!(pr.fp_total(0), 1);
    }

    #[test]
    fn class_without_detections_has_zero_rows() {
        let det = batch(array![[0]], array![[0.9]], 0);
        let d = CategoryMatrix {
            values: array![[Category::TruePositive.code()]],
        };
        let mut acc = Accumulator::new(vec![1, 3]);
        acc.extract(&d, &det);
        let pr = acc.compute_pr(1e-9);
        assert!(pr.precision().row(1).iter().all(|&p| p == 0.0));
        assert!(pr.recall().row(1).iter().all(|&q| q == 0.0));
    }

    #[test]
    fn zero_easy_ground_truth_gives_zero_recall() {
        let det = batch(array![[0]], array![[0.9]], 0);
        let d = CategoryMatrix {
            values: array![[1]],
        };
        let mut acc = Accumulator::new(vec![0]);
        acc.extract(&d, &det);
        let pr = acc.compute_pr(1e-9);
        assert_eq!(pr.recall()[[0, 0]], 0.0);
        assert_eq!(pr.precision()[[0, 0]], 0.0);
    }

    #[test]
    fn other_class_columns_hold_frozen_values() {
        let det = batch(array![[0, 1, 0]], array![[0.9, 0.8, 0.7]], 0);
        let d = CategoryMatrix {
            values: array![[2, 2, 1]],
        };
        let mut acc = Accumulator::new(vec![2, 1]);
        acc.extract(&d, &det);
        let pr = acc.compute_pr(1e-9);
        assert_eq!(pr.precision().row(0).to_vec(), vec![1.0, 1.0, 0.5]);
        assert_eq!(pr.recall().row(0).to_vec(), vec![0.5, 0.5, 0.5]);
        assert_eq!(pr.precision().row(1).to_vec(), vec![0.0, 1.0, 1.0]);
        assert_eq!(pr.column_class(), &[0, 1, 0]);
    }

    #[test]
    fn ties_rank_by_image_then_slot() {
        let a = batch(array![[0, 0]], array![[0.5, 0.5]], 3);
        let b = batch(array![[0]], array![[0.5]], 1);
        let mut acc = Accumulator::new(vec![3]);
        acc.extract(
            &CategoryMatrix {
                values: array![[1, 2]],
            },
            &a,
        );
        acc.extract(
            &CategoryMatrix {
                values: array![[2]],
            },
            &b,
        );
        // ranked: image 1 slot 0 (TP), image 3 slot 0 (FP), image 3 slot 1 (TP)
        let pr = acc.compute_pr(1e-9);
        assert_eq!(pr.class_curve(0).0, vec![1.0, 0.5, 2.0 / 3.0]);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let det = batch(array![[0, 0]], array![[0.9, 0.8]], 0);
        let mut x = Accumulator::new(vec![2]);
        x.extract(
            &CategoryMatrix {
                values: array![[2, 1]],
            },
            &det,
        );
        let merged = Accumulator::new(vec![2]).merge(x.clone()).unwrap();
        assert_eq!(merged.compute_pr(1e-9), x.compute_pr(1e-9));
    }

    #[test]
    fn merge_rejects_different_easy_counts() {
        let err = Accumulator::new(vec![1])
            .merge(Accumulator::new(vec![2]))
            .unwrap_err();
        assert!(matches!(err, Error::AccumulatorMismatch(_)));
    }
}
