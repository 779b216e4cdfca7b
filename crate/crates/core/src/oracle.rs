//! Sequential reference evaluation and a seeded synthetic workload generator.
//!
//! [`sequential_evaluate`] is the classic per-class loop: detections of one
//! class are ranked dataset-wide and visited one at a time, each checking a
//! table of already-matched ground truths. It serves as the reference for
//! the batched pipeline and as the baseline for benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{count_easy_gt, Dataset};
use crate::matcher::rank_cmp;
use crate::model::{BBox, Category, ImageDetections, ImageGroundTruth};

/// How the sequential pass categorized one detection. Ground-truth indices
/// refer to the image's ground-truth list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SequentialOutcome {
    /// Removed by post-processing, so never evaluated.
    Discarded,
    TruePositive {
        gt: usize,
    },
    /// `gt` is the already-claimed best match, or `None` when no same-class
    /// ground truth overlaps above the threshold.
    FalsePositive {
        gt: Option<usize>,
    },
    /// Best match is a difficult ground truth.
    IgnoredDifficult {
        gt: usize,
    },
}

impl SequentialOutcome {
    pub fn category(&self) -> Category {
        match self {
            SequentialOutcome::TruePositive { .. } => Category::TruePositive,
            SequentialOutcome::FalsePositive { .. } => Category::FalsePositive,
            SequentialOutcome::Discarded | SequentialOutcome::IgnoredDifficult { .. } => {
                Category::Ignored
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialResult {
    pub classes: Vec<ClassCurve>,
    /// `outcomes[image][slot]`
    pub outcomes: Vec<Vec<SequentialOutcome>>,
    pub easy_gt_counts: Vec<usize>,
}

/// Reference evaluation of `dataset` at IoU threshold `t`.
pub fn sequential_evaluate(dataset: &Dataset, t: f64, epsilon: f64) -> SequentialResult {
    let k = dataset.num_classes();
    let gts = dataset.ground_truth();
    let dets = dataset.detections();
    let easy = count_easy_gt(dataset);

    let mut outcomes: Vec<Vec<SequentialOutcome>> = dets
        .iter()
        .map(|d| vec![SequentialOutcome::Discarded; d.len()])
        .collect();

    // per class: (score, image, slot) of every kept detection
    let mut by_class: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); k];
    for (img, d) in dets.iter().enumerate() {
        for slot in 0..d.len() {
            if !d.discarded()[slot] {
                by_class[d.labels()[slot]].push((d.scores()[slot], img, slot));
            }
        }
    }

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut classes = Vec::with_capacity(k);

    for (class, mut ranked) in by_class.into_iter().enumerate() {
        ranked.sort_by(|&a, &b| rank_cmp(a, b));
        let mut tp = vec![0u32; ranked.len()];
        let mut fp = vec![0u32; ranked.len()];

        for (j, &(_, img, slot)) in ranked.iter().enumerate() {
            let b = dets[img].boxes()[slot].coords();
            let gt = &gts[img];
            let same_class: Vec<usize> = gt
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(g, _)| g)
                .collect();

            let mut best_iou = f64::NEG_INFINITY;
            let mut best = 0;
            if !same_class.is_empty() {
                let overlaps: Vec<f64> = same_class
                    .iter()
                    .map(|&g| {
                        let c = gt.boxes()[g].coords();
                        let w = (b[2].min(c[2]) - b[0].max(c[0]) + 1.0).max(0.0);
                        let h = (b[3].min(c[3]) - b[1].max(c[1]) + 1.0).max(0.0);
                        let a = (b[2] - b[0] + 1.0) * (b[3] - b[1] + 1.0);
                        let a_gt = (c[2] - c[0] + 1.0) * (c[3] - c[1] + 1.0);
                        w * h / (a + a_gt - w * h)
                    })
                    .collect();
                for (i, &o) in overlaps.iter().enumerate() {
                    if o > best_iou {
                        best_iou = o;
                        best = i;
                    }
                }
            }

            outcomes[img][slot] = if best_iou > t {
                let g = same_class[best];
                if gt.difficult()[g] {
                    SequentialOutcome::IgnoredDifficult { gt: g }
                } else if !matched[img][g] {
                    tp[j] = 1;
                    matched[img][g] = true;
                    SequentialOutcome::TruePositive { gt: g }
                } else {
                    fp[j] = 1;
                    SequentialOutcome::FalsePositive { gt: Some(g) }
                }
            } else {
                fp[j] = 1;
                SequentialOutcome::FalsePositive { gt: None }
            };
        }

        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        let (mut cum_tp, mut cum_fp) = (0u32, 0u32);
        for (&u, &v) in tp.iter().zip(&fp) {
            cum_tp += u;
            cum_fp += v;
            let u = f64::from(cum_tp);
            precision.push(u / (u + f64::from(cum_fp)).max(epsilon));
            recall.push(if easy[class] > 0 {
                u / easy[class] as f64
            } else {
                0.0
            });
        }
        classes.push(ClassCurve {
            precision,
            recall,
            tp: cum_tp as usize,
            fp: cum_fp as usize,
        });
    }

    SequentialResult {
        classes,
        outcomes,
        easy_gt_counts: easy,
    }
}

/// Parameters of a random evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub images: usize,
    pub classes: usize,
    /// Inclusive range of ground-truth boxes per image.
    pub gts_per_image: (usize, usize),
    /// Inclusive range of detections emitted for each ground truth.
    pub dets_per_gt: (usize, usize),
    /// Largest per-coordinate shift of a true detection, in pixels.
    pub jitter: u32,
    /// `0` draws scores uniformly from `[0, 1)`; otherwise scores are
    /// multiples of `1 / score_levels`, which produces ties.
    pub score_levels: u32,
    pub difficult_prob: f64,
    pub discard_prob: f64,
    /// Probability that each true detection is followed by a random false one.
    pub false_detection_rate: f64,
    /// Side length of the square canvas.
    pub canvas: u32,
    /// Inclusive range of box side lengths.
    pub box_size: (u32, u32),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 100,
            classes: 5,
            gts_per_image: (0, 10),
            dets_per_gt: (1, 2),
            jitter: 4,
            score_levels: 0,
            difficult_prob: 0.1,
            discard_prob: 0.05,
            false_detection_rate: 0.3,
            canvas: 128,
            box_size: (8, 48),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_owned()));
        if self.classes == 0 {
            return bad("synthetic spec needs at least one class");
        }
        if self.gts_per_image.1 < self.gts_per_image.0 {
            return bad("ground truths per image: max < min");
        }
        if self.dets_per_gt.1 < self.dets_per_gt.0 {
            return bad("detections per ground truth: max < min");
        }
        if self.box_size.1 < self.box_size.0 || self.box_size.0 == 0 {
            return bad("box size range must be positive with max >= min");
        }
        if self.box_size.1 > self.canvas {
            return bad("boxes must fit in the canvas");
        }
        for p in [
            self.difficult_prob,
            self.discard_prob,
            self.false_detection_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> [i64; 4] {
    let w = rng.gen_range(spec.box_size.0..=spec.box_size.1) as i64;
    let h = rng.gen_range(spec.box_size.0..=spec.box_size.1) as i64;
    let canvas = spec.canvas as i64;
    let x0 = rng.gen_range(0..=canvas - w);
    let y0 = rng.gen_range(0..=canvas - h);
    [x0, y0, x0 + w - 1, y0 + h - 1]
}

fn jittered(rng: &mut ChaCha8Rng, b: [i64; 4], jitter: u32) -> [i64; 4] {
    let j = jitter as i64;
    let mut c = b.map(|v| v + if j > 0 { rng.gen_range(-j..=j) } else { 0 });
    if c[2] < c[0] {
        c.swap(0, 2);
    }
    if c[3] < c[1] {
        c.swap(1, 3);
    }
    c
}

fn score(rng: &mut ChaCha8Rng, levels: u32) -> f64 {
    if levels == 0 {
        rng.gen::<f64>()
    } else {
        f64::from(rng.gen_range(0..=levels)) / f64::from(levels)
    }
}

fn to_bbox(c: [i64; 4]) -> BBox {
    BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64)
        .expect("generated boxes are ordered")
}

/// Draws a dataset from `spec`. The same spec always yields the same dataset.
///
/// Ground-truth boxes of one class never coincide exactly within an image.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ground_truth = Vec::with_capacity(spec.images);
    let mut detections = Vec::with_capacity(spec.images);

    for img in 0..spec.images {
        let image_id = format!("img{img:06}");
        let count = rng.gen_range(spec.gts_per_image.0..=spec.gts_per_image.1);
        let mut gt_boxes: Vec<[i64; 4]> = Vec::with_capacity(count);
        let mut gt_labels = Vec::with_capacity(count);
        let mut difficult = Vec::with_capacity(count);
        while gt_boxes.len() < count {
            let b = random_box(&mut rng, spec);
            let label = rng.gen_range(0..spec.classes);
            let duplicate = gt_boxes
                .iter()
                .zip(&gt_labels)
                .any(|(other, &l)| *other == b && l == label);
            if duplicate {
                continue;
            }
            gt_boxes.push(b);
            gt_labels.push(label);
            difficult.push(rng.gen_bool(spec.difficult_prob));
        }

        // (box, label, score)
        let mut dets: Vec<([i64; 4], usize, f64)> = Vec::new();
        for (b, &label) in gt_boxes.iter().zip(&gt_labels) {
            let n = rng.gen_range(spec.dets_per_gt.0..=spec.dets_per_gt.1);
            for _ in 0..n {
                let c = jittered(&mut rng, *b, spec.jitter);
                dets.push((c, label, score(&mut rng, spec.score_levels)));
                if rng.gen_bool(spec.false_detection_rate) {
                    let c = random_box(&mut rng, spec);
                    let l = rng.gen_range(0..spec.classes);
                    dets.push((c, l, score(&mut rng, spec.score_levels)));
                }
            }
        }
        dets.shuffle(&mut rng);
        let discarded: Vec<bool> = dets
            .iter()
            .map(|_| rng.gen_bool(spec.discard_prob))
            .collect();

        ground_truth.push(
            ImageGroundTruth::new(
                image_id.clone(),
                gt_boxes.into_iter().map(to_bbox).collect(),
                gt_labels,
                difficult,
            )
            .expect("generated ground truth is consistent"),
        );
        detections.push(
            ImageDetections::new(
                image_id,
                dets.iter().map(|d| to_bbox(d.0)).collect(),
                dets.iter().map(|d| d.1).collect(),
                dets.iter().map(|d| d.2).collect(),
                discarded,
            )
            .expect("generated detections are consistent"),
        );
    }

    Dataset::new(ground_truth, detections, spec.classes)
}
