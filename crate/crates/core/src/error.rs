use thiserror::Error;

/// A violated record invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("non-finite box coordinate")]
    NonFiniteCoordinate,
    #[error("xmax < xmin ({xmax} < {xmin})")]
    XOrder { xmin: f64, xmax: f64 },
    #[error("ymax < ymin ({ymax} < {ymin})")]
    YOrder { ymin: f64, ymax: f64 },
    #[error("{field} has length {actual}, expected {expected} (one per box)")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("score out of range: {0}")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImage { line: usize, image_id: String },
    #[error("detections for unknown image {0:?}")]
    UnknownImage(String),
    #[error("image {image_id:?}: {source}")]
    Record {
        image_id: String,
        #[source]
        source: RecordError,
    },
    #[error("image {image_id:?} has {count} {kind}, more than the {capacity} slots available")]
    Capacity {
        image_id: String,
        kind: &'static str,
        count: usize,
        capacity: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sentinel {sentinel} must exceed the detection slot count {slots}")]
    Sentinel { sentinel: usize, slots: usize },
    #[error("cannot merge accumulators: {0}")]
    AccumulatorMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
