//! Interchange-file parsing, dataset assembly and fixed-shape batching.
//!
//! Both interchange files hold one JSON object per line. Ground truth:
//!
//! ```text
//! {"image_id":"a","boxes":[[0,0,9,9]],"labels":[0],"difficult":[false]}
//! ```
//!
//! Detections carry `scores` instead of `difficult` and an optional
//! `discarded` list (defaults to all `false`).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use ndarray::{s, Array2, Array3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    DetBatch, EvalConfig, ImageDetections, ImageGroundTruth, PaddedGtBatch, PAD_LABEL,
};

trait Keyed {
    fn key(&self) -> &str;
}

impl Keyed for ImageGroundTruth {
    fn key(&self) -> &str {
        self.image_id()
    }
}

impl Keyed for ImageDetections {
    fn key(&self) -> &str {
        self.image_id()
    }
}

fn parse_lines<T, R>(reader: R) -> Result<Vec<T>>
where
    T: DeserializeOwned + Keyed,
    R: BufRead,
{
    let mut records: Vec<T> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.key().to_owned()) {
            return Err(Error::DuplicateImage {
                line: line_no,
                image_id: record.key().to_owned(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Parses a line-delimited ground-truth file.
pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<Vec<ImageGroundTruth>> {
    parse_lines(reader)
}

/// Parses a line-delimited detections file.
pub fn parse_detections<R: BufRead>(reader: R) -> Result<Vec<ImageDetections>> {
    parse_lines(reader)
}

fn write_lines<T: Serialize, W: Write>(records: &[T], mut writer: W) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(records: &[ImageGroundTruth], writer: W) -> Result<()> {
    write_lines(records, writer)
}

pub fn write_detections<W: Write>(records: &[ImageDetections], writer: W) -> Result<()> {
    write_lines(records, writer)
}

/// `1 + max label` over both record sets, or `None` when neither has a label.
pub fn infer_num_classes(gt: &[ImageGroundTruth], det: &[ImageDetections]) -> Option<usize> {
    gt.iter()
        .flat_map(|r| r.labels().iter())
        .chain(det.iter().flat_map(|r| r.labels().iter()))
        .max()
        .map(|&l| l + 1)
}

/// Ground truth and detections aligned by image.
///
/// Image `i` is the `i`-th ground-truth record; images without a detections
/// record get an empty one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ground_truth: Vec<ImageGroundTruth>,
    detections: Vec<ImageDetections>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        ground_truth: Vec<ImageGroundTruth>,
        detections: Vec<ImageDetections>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut position = HashMap::with_capacity(ground_truth.len());
        for (i, gt) in ground_truth.iter().enumerate() {
            if position.insert(gt.image_id().to_owned(), i).is_some() {
                return Err(Error::DuplicateImage {
                    line: i + 1,
                    image_id: gt.image_id().to_owned(),
                });
            }
            gt.validate(num_classes).map_err(|source| Error::Record {
                image_id: gt.image_id().to_owned(),
                source,
            })?;
        }

        let mut aligned: Vec<Option<ImageDetections>> = vec![None; ground_truth.len()];
        for (line, det) in detections.into_iter().enumerate() {
            let &i = position
                .get(det.image_id())
                .ok_or_else(|| Error::UnknownImage(det.image_id().to_owned()))?;
            det.validate(num_classes).map_err(|source| Error::Record {
                image_id: det.image_id().to_owned(),
                source,
            })?;
            if aligned[i].is_some() {
                return Err(Error::DuplicateImage {
                    line: line + 1,
                    image_id: det.image_id().to_owned(),
                });
            }
            aligned[i] = Some(det);
        }
        let detections = aligned
            .into_iter()
            .zip(&ground_truth)
            .map(|(d, gt)| d.unwrap_or_else(|| ImageDetections::empty(gt.image_id())))
            .collect();

        Ok(Self {
            ground_truth,
            detections,
            num_classes,
        })
    }

    pub fn ground_truth(&self) -> &[ImageGroundTruth] {
        &self.ground_truth
    }

    /// One record per image, in ground-truth order.
    pub fn detections(&self) -> &[ImageDetections] {
        &self.detections
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of images `g`.
    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }

    /// Same dataset with images reordered: image `i` of the result is image
    /// `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let gt = order
            .iter()
            .map(|&i| self.ground_truth[i].clone())
            .collect();
        let det = order.iter().map(|&i| self.detections[i].clone()).collect();
        Dataset::new(gt, det, self.num_classes)
    }
}

/// Copies a batch of ground-truth records into fixed `n × m̂` arrays.
pub fn pad_gt_batch(
    images: &[ImageGroundTruth],
    max_gts: usize,
    num_classes: usize,
) -> Result<PaddedGtBatch> {
    let n = images.len();
    let mut coords = Array3::<f64>::zeros((n, max_gts, 4));
    let mut labels = Array2::<usize>::from_elem((n, max_gts), PAD_LABEL);
    let mut ignore_mask = Array2::<bool>::from_elem((n, max_gts), true);

    for (i, img) in images.iter().enumerate() {
        let len = img.len();
        if len > max_gts {
            return Err(Error::Capacity {
                image_id: img.image_id().to_owned(),
                kind: "ground-truth boxes",
                count: len,
                capacity: max_gts,
            });
        }
        img.validate(num_classes).map_err(|source| Error::Record {
            image_id: img.image_id().to_owned(),
            source,
        })?;
        for (j, b) in img.boxes().iter().enumerate() {
            for (k, v) in b.coords().into_iter().enumerate() {
                coords[[i, j, k]] = v;
            }
        }
        labels
            .slice_mut(s![i, ..len])
            .assign(&ndarray::ArrayView1::from(img.labels()));
        ignore_mask
            .slice_mut(s![i, ..len])
            .assign(&ndarray::ArrayView1::from(img.difficult()));
    }

    Ok(PaddedGtBatch {
        coords,
        labels,
        ignore_mask,
    })
}

/// Copies a batch of detection records into fixed `n × m` arrays.
///
/// Padded slots get a zero box, score 0 and `discard_mask = true`.
pub fn build_det_batch(images: &[ImageDetections], max_dets: usize) -> Result<DetBatch> {
    let n = images.len();
    let mut coords = Array3::<f64>::zeros((n, max_dets, 4));
    let mut labels = Array2::<usize>::zeros((n, max_dets));
    let mut scores = Array2::<f64>::zeros((n, max_dets));
    let mut discard_mask = Array2::<bool>::from_elem((n, max_dets), true);

    for (i, img) in images.iter().enumerate() {
        let len = img.len();
        if len > max_dets {
            return Err(Error::Capacity {
                image_id: img.image_id().to_owned(),
                kind: "detections",
                count: len,
                capacity: max_dets,
            });
        }
        for (j, b) in img.boxes().iter().enumerate() {
            for (k, v) in b.coords().into_iter().enumerate() {
                coords[[i, j, k]] = v;
            }
        }
        labels
            .slice_mut(s![i, ..len])
            .assign(&ndarray::ArrayView1::from(img.labels()));
        scores
            .slice_mut(s![i, ..len])
            .assign(&ndarray::ArrayView1::from(img.scores()));
        discard_mask
            .slice_mut(s![i, ..len])
            .assign(&ndarray::ArrayView1::from(img.discarded()));
    }

    Ok(DetBatch {
        coords,
        labels,
        scores,
        discard_mask,
        first_image: 0,
    })
}

/// Per-class count of non-difficult ground-truth boxes.
pub fn count_easy_gt(dataset: &Dataset) -> Vec<usize> {
    let mut counts = vec![0usize; dataset.num_classes()];
    for gt in dataset.ground_truth() {
        for (&label, &difficult) in gt.labels().iter().zip(gt.difficult()) {
            if !difficult {
                counts[label] += 1;
            }
        }
    }
    counts
}

/// Yields `⌈g / n⌉` batch pairs in image order. The final batch holds the
/// remaining images and is never padded with empty images.
pub fn batch_iter<'a>(
    dataset: &'a Dataset,
    config: &'a EvalConfig,
) -> impl Iterator<Item = Result<(DetBatch, PaddedGtBatch)>> + 'a {
    let n = config.batch_size.max(1);
    (0..dataset.len())
        .step_by(n)
        .map(move |start| make_batch(dataset, config, start, (start + n).min(dataset.len())))
}

/// Builds the batch pair covering images `start..end`.
pub fn make_batch(
    dataset: &Dataset,
    config: &EvalConfig,
    start: usize,
    end: usize,
) -> Result<(DetBatch, PaddedGtBatch)> {
    let gts = &dataset.ground_truth()[start..end];
    let dets = &dataset.detections()[start..end];
    let max_gts = config
        .max_gts_per_image
        .unwrap_or_else(|| gts.iter().map(|g| g.len()).max().unwrap_or(0));
    let max_dets = config
        .max_dets_per_image
        .unwrap_or_else(|| dets.iter().map(|d| d.len()).max().unwrap_or(0));
    let gt = pad_gt_batch(gts, max_gts, dataset.num_classes())?;
    let det = build_det_batch(dets, max_dets)?.with_first_image(start);
    Ok((det, gt))
}
