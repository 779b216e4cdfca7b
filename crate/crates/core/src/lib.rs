//! Mean average precision for object detection, computed over padded image
//! batches with array operations instead of a per-detection loop.
//!
//! The pipeline pads ground truth and detections into fixed-shape batches
//! ([`ingest`]), computes every IoU at once and categorizes each detection
//! as true positive, false positive or ignored ([`matcher`]), folds the
//! results into a global store that yields precision/recall curves
//! ([`accumulator`]), and integrates those into AP ([`ap`]). A plain
//! sequential implementation lives in [`oracle`] for cross-checking.
//!
//! ```
//! use detmap::{evaluate, BBox, Dataset, EvalConfig, ImageDetections, ImageGroundTruth};
//!
//! let b = BBox::new(0.0, 0.0, 9.0, 9.0).unwrap();
//! let gt = vec![ImageGroundTruth::new("a", vec![b], vec![0], vec![false]).unwrap()];
//! let det = vec![ImageDetections::kept("a", vec![b], vec![0], vec![0.9]).unwrap()];
//! let dataset = Dataset::new(gt, det, 1).unwrap();
//! let result = evaluate(&dataset, &EvalConfig::new(1), 1).unwrap();
//! assert_eq!(result.mean_map, 1.0);
//! ```

pub mod accumulator;
pub mod ap;
pub mod cli;
pub mod error;
pub mod ingest;
pub mod matcher;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod report;

pub use ap::ApReport;
pub use error::{Error, RecordError, Result};
pub use ingest::Dataset;
pub use model::{
    Accumulator, ApMethod, BBox, Category, CategoryMatrix, DetBatch, EvalConfig, ImageDetections,
    ImageGroundTruth, PaddedGtBatch, PrCurves, PAD_LABEL,
};
pub use oracle::{generate, sequential_evaluate, SyntheticSpec};
pub use pipeline::{evaluate, Evaluation};
