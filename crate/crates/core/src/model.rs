//! Domain types shared by every stage of the evaluation pipeline.
//!
//! Irregular per-image records ([`ImageGroundTruth`], [`ImageDetections`]) are
//! validated on construction. The fixed-shape batch types ([`PaddedGtBatch`],
//! [`DetBatch`]) are only produced by [`crate::ingest`], which guarantees the
//! padding invariants.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordError, Result};

/// Label stored in padded ground-truth slots. Never equal to a class index.
pub const PAD_LABEL: usize = usize::MAX;

/// Axis-aligned box in inclusive pixel coordinates.
///
/// Both corners belong to the box, so a box spanning `0..=9` is ten pixels
/// wide and `area` adds one to each side length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, RecordError> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(RecordError::NonFiniteCoordinate);
        }
        if xmax < xmin {
            return Err(RecordError::XOrder { xmin, xmax });
        }
        if ymax < ymin {
            return Err(RecordError::YOrder { ymin, ymax });
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn xmin(&self) -> f64 {
        self.xmin
    }

    pub fn ymin(&self) -> f64 {
        self.ymin
    }

    pub fn xmax(&self) -> f64 {
        self.xmax
    }

    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    /// `[xmin, ymin, xmax, ymax]`
    pub fn coords(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin + 1.0) * (self.ymax - self.ymin + 1.0)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = RecordError;

    fn try_from(c: [f64; 4]) -> Result<Self, RecordError> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

fn check_len(field: &'static str, expected: usize, actual: usize) -> Result<(), RecordError> {
    if expected == actual {
        Ok(())
    } else {
        Err(RecordError::LengthMismatch {
            field,
            expected,
            actual,
        })
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), RecordError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(RecordError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Ground-truth annotations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGroundTruth", into = "RawGroundTruth")]
pub struct ImageGroundTruth {
    image_id: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    difficult: Vec<bool>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroundTruth {
    image_id: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    difficult: Vec<bool>,
}

impl TryFrom<RawGroundTruth> for ImageGroundTruth {
    type Error = RecordError;

    fn try_from(raw: RawGroundTruth) -> Result<Self, RecordError> {
        ImageGroundTruth::new(raw.image_id, raw.boxes, raw.labels, raw.difficult)
    }
}

impl From<ImageGroundTruth> for RawGroundTruth {
    fn from(gt: ImageGroundTruth) -> Self {
        RawGroundTruth {
            image_id: gt.image_id,
            boxes: gt.boxes,
            labels: gt.labels,
            difficult: gt.difficult,
        }
    }
}

impl ImageGroundTruth {
    pub fn new(
        image_id: impl Into<String>,
        boxes: Vec<BBox>,
        labels: Vec<usize>,
        difficult: Vec<bool>,
    ) -> Result<Self, RecordError> {
        check_len("labels", boxes.len(), labels.len())?;
        check_len("difficult", boxes.len(), difficult.len())?;
        Ok(Self {
            image_id: image_id.into(),
            boxes,
            labels,
            difficult,
        })
    }

    /// Checks the label range against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<(), RecordError> {
        check_labels(&self.labels, num_classes)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn difficult(&self) -> &[bool] {
        &self.difficult
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Detector output for one image, including detections removed by
/// post-processing (flagged in `discarded`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetections", into = "RawDetections")]
pub struct ImageDetections {
    image_id: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    scores: Vec<f64>,
    discarded: Vec<bool>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetections {
    image_id: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    scores: Vec<f64>,
    #[serde(default)]
    discarded: Option<Vec<bool>>,
}

impl TryFrom<RawDetections> for ImageDetections {
    type Error = RecordError;

    fn try_from(raw: RawDetections) -> Result<Self, RecordError> {
        let discarded = raw
            .discarded
            .unwrap_or_else(|| vec![false; raw.boxes.len()]);
        ImageDetections::new(raw.image_id, raw.boxes, raw.labels, raw.scores, discarded)
    }
}

impl From<ImageDetections> for RawDetections {
    fn from(d: ImageDetections) -> Self {
        RawDetections {
            image_id: d.image_id,
            boxes: d.boxes,
            labels: d.labels,
            scores: d.scores,
            discarded: Some(d.discarded),
        }
    }
}

impl ImageDetections {
    pub fn new(
        image_id: impl Into<String>,
        boxes: Vec<BBox>,
        labels: Vec<usize>,
        scores: Vec<f64>,
        discarded: Vec<bool>,
    ) -> Result<Self, RecordError> {
        check_len("labels", boxes.len(), labels.len())?;
        check_len("scores", boxes.len(), scores.len())?;
        check_len("discarded", boxes.len(), discarded.len())?;
        if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(RecordError::ScoreOutOfRange(s));
        }
        Ok(Self {
            image_id: image_id.into(),
            boxes,
            labels,
            scores,
            discarded,
        })
    }

    /// Detections that all survived post-processing.
    pub fn kept(
        image_id: impl Into<String>,
        boxes: Vec<BBox>,
        labels: Vec<usize>,
        scores: Vec<f64>,
    ) -> Result<Self, RecordError> {
        let discarded = vec![false; boxes.len()];
        Self::new(image_id, boxes, labels, scores, discarded)
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes: Vec::new(),
            labels: Vec::new(),
            scores: Vec::new(),
            discarded: Vec::new(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), RecordError> {
        check_labels(&self.labels, num_classes)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn discarded(&self) -> &[bool] {
        &self.discarded
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Ground truth of `n` images padded to `m̂` slots each.
///
/// Padded slots hold a zero box, [`PAD_LABEL`] and `ignore_mask = true`;
/// real slots carry the annotation's difficult flag in `ignore_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedGtBatch {
    pub(crate) coords: Array3<f64>,
    pub(crate) labels: Array2<usize>,
    pub(crate) ignore_mask: Array2<bool>,
}

impl PaddedGtBatch {
    /// `n × m̂ × 4`
    pub fn coords(&self) -> &Array3<f64> {
        &self.coords
    }

    pub fn labels(&self) -> &Array2<usize> {
        &self.labels
    }

    pub fn ignore_mask(&self) -> &Array2<bool> {
        &self.ignore_mask
    }

    pub fn batch_len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn slots(&self) -> usize {
        self.labels.ncols()
    }
}

/// Detections of `n` consecutive images padded to `m` slots each.
#[derive(Debug, Clone, PartialEq)]
pub struct DetBatch {
    pub(crate) coords: Array3<f64>,
    pub(crate) labels: Array2<usize>,
    pub(crate) scores: Array2<f64>,
    pub(crate) discard_mask: Array2<bool>,
    pub(crate) first_image: usize,
}

impl DetBatch {
    /// `n × m × 4`
    pub fn coords(&self) -> &Array3<f64> {
        &self.coords
    }

    pub fn labels(&self) -> &Array2<usize> {
        &self.labels
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// True for detections discarded by post-processing and for padded slots.
    pub fn discard_mask(&self) -> &Array2<bool> {
        &self.discard_mask
    }

    /// Dataset index of the batch's first image; row `i` is image `first_image + i`.
    pub fn first_image(&self) -> usize {
        self.first_image
    }

    pub fn with_first_image(mut self, first_image: usize) -> Self {
        self.first_image = first_image;
        self
    }

    pub fn batch_len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn slots(&self) -> usize {
        self.labels.ncols()
    }
}

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Ignored = 0,
    FalsePositive = 1,
    TruePositive = 2,
}

impl Category {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Category::Ignored),
            1 => Some(Category::FalsePositive),
            2 => Some(Category::TruePositive),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Ignored => "ignored",
            Category::FalsePositive => "FP",
            Category::TruePositive => "TP",
        })
    }
}

/// Per-detection category codes, `n × m`: 0 ignored, 1 FP, 2 TP.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMatrix {
    pub(crate) values: Array2<u8>,
}

impl CategoryMatrix {
    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn get(&self, image: usize, slot: usize) -> Category {
        Category::from_code(self.values[[image, slot]]).expect("category codes are 0, 1 or 2")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Exact area under the raw curve by trapezoids.
    Trapezoid,
    /// Area under the curve with spikes flattened into steps.
    Step,
    /// Mean interpolated precision at fixed recall levels.
    RecallLevels,
}

impl FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(ApMethod::Trapezoid),
            "step" => Ok(ApMethod::Step),
            "recall-levels" => Ok(ApMethod::RecallLevels),
            other => Err(Error::Config(format!("unknown AP method {other:?}"))),
        }
    }
}

impl fmt::Display for ApMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMethod::Trapezoid => "trapezoid",
            ApMethod::Step => "step",
            ApMethod::RecallLevels => "recall-levels",
        })
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// The 11-point grid `{0.0, 0.1, …, 1.0}`.
pub fn eleven_point_levels() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_classes: usize,
    pub iou_thresholds: Vec<f64>,
    pub ap_method: ApMethod,
    pub recall_levels: Vec<f64>,
    pub epsilon: f64,
    /// Detection slots per image; `None` sizes each batch to its largest image.
    pub max_dets_per_image: Option<usize>,
    /// Ground-truth slots per image; `None` sizes each batch to its largest image.
    pub max_gts_per_image: Option<usize>,
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            iou_thresholds: vec![0.5],
            ap_method: ApMethod::Trapezoid,
            recall_levels: eleven_point_levels(),
            epsilon: DEFAULT_EPSILON,
            max_dets_per_image: None,
            max_gts_per_image: None,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("class count must be positive".into());
        }
        if self.iou_thresholds.is_empty() {
            return bad("at least one IoU threshold is required".into());
        }
        if let Some(t) = self
            .iou_thresholds
            .iter()
            .find(|t| !(**t > 0.0 && **t < 1.0))
        {
            return bad(format!("IoU threshold {t} outside (0, 1)"));
        }
        if self.ap_method == ApMethod::RecallLevels && self.recall_levels.is_empty() {
            return bad("recall-levels method needs at least one level".into());
        }
        if let Some(r) = self
            .recall_levels
            .iter()
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return bad(format!("recall level {r} outside [0, 1]"));
        }
        if self.recall_levels.windows(2).any(|w| w[1] < w[0]) {
            return bad("recall levels must be sorted ascending".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!(
                "epsilon must be a small positive number, got {}",
                self.epsilon
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Running store of every non-ignored detection seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub(crate) labels: Vec<usize>,
    pub(crate) scores: Vec<f64>,
    pub(crate) tp_flags: Vec<bool>,
    pub(crate) image_index: Vec<usize>,
    pub(crate) det_index: Vec<usize>,
    pub(crate) easy_gt_counts: Vec<usize>,
}

impl Accumulator {
    /// Empty store for `easy_gt_counts.len()` classes.
    pub fn new(easy_gt_counts: Vec<usize>) -> Self {
        Self {
            labels: Vec::new(),
            scores: Vec::new(),
            tp_flags: Vec::new(),
            image_index: Vec::new(),
            det_index: Vec::new(),
            easy_gt_counts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.easy_gt_counts.len()
    }

    pub fn easy_gt_counts(&self) -> &[usize] {
        &self.easy_gt_counts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn tp_flags(&self) -> &[bool] {
        &self.tp_flags
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-class precision/recall rows over all `z` non-ignored detections in
/// global score order.
///
/// Column `j` belongs to class `column_class[j]`; other rows hold their last
/// cumulative value there.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurves {
    pub(crate) precision: Array2<f64>,
    pub(crate) recall: Array2<f64>,
    pub(crate) tp_totals: Vec<usize>,
    pub(crate) fp_totals: Vec<usize>,
    pub(crate) column_class: Vec<usize>,
    pub(crate) easy_gt_counts: Vec<usize>,
}

impl PrCurves {
    /// `k × z`
    pub fn precision(&self) -> &Array2<f64> {
        &self.precision
    }

    /// `k × z`
    pub fn recall(&self) -> &Array2<f64> {
        &self.recall
    }

    pub fn column_class(&self) -> &[usize] {
        &self.column_class
    }

    pub fn easy_gt_counts(&self) -> &[usize] {
        &self.easy_gt_counts
    }

    pub fn num_classes(&self) -> usize {
        self.easy_gt_counts.len()
    }

    /// Number of detections `z` across all classes.
    pub fn len(&self) -> usize {
        self.column_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.column_class.is_empty()
    }

    /// Final cumulative TP count of `class`.
    pub fn tp_total(&self, class: usize) -> usize {
        self.tp_totals[class]
    }

    /// Final cumulative FP count of `class`.
    pub fn fp_total(&self, class: usize) -> usize {
        self.fp_totals[class]
    }

    /// Class `class`'s curve restricted to its own detection columns, as
    /// `(precision, recall)`.
    pub fn class_curve(&self, class: usize) -> (Vec<f64>, Vec<f64>) {
        let columns = self.class_columns(class);
        let p = columns
            .iter()
            .map(|&j| self.precision[[class, j]])
            .collect();
        let q = columns.iter().map(|&j| self.recall[[class, j]]).collect();
        (p, q)
    }

    /// [`PrCurves::class_curve`] of every class, gathered in one pass.
    pub fn class_curves(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut curves = vec![(Vec::new(), Vec::new()); self.num_classes()];
        for (j, &c) in self.column_class.iter().enumerate() {
            curves[c].0.push(self.precision[[c, j]]);
            curves[c].1.push(self.recall[[c, j]]);
        }
        curves
    }

    pub(crate) fn class_columns(&self, class: usize) -> Vec<usize> {
        self.column_class
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(j, _)| j)
            .collect()
    }
}
