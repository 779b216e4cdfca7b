//! Machine-readable reports produced by the command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ap::{ap_step_everypoint, recall_levels_ap, ApReport};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::matcher::box_iou;
use crate::model::{ApMethod, Category, EvalConfig, PrCurves};
use crate::oracle::{generate, sequential_evaluate, SequentialOutcome, SyntheticSpec};
use crate::pipeline::{accumulate, categorize_dataset, evaluate, Evaluation, StageTimings};

/// Evaluation settings that determine the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub num_classes: usize,
    pub iou_thresholds: Vec<f64>,
    pub ap_method: ApMethod,
    pub recall_levels: Vec<f64>,
    pub epsilon: f64,
}

impl From<&EvalConfig> for ConfigEcho {
    fn from(c: &EvalConfig) -> Self {
        Self {
            num_classes: c.num_classes,
            iou_thresholds: c.iou_thresholds.clone(),
            ap_method: c.ap_method,
            recall_levels: c.recall_levels.clone(),
            epsilon: c.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub iou_threshold: f64,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub easy_gt: Vec<usize>,
}

impl ClassTotals {
    fn from_curves(iou_threshold: f64, curves: &PrCurves) -> Self {
        let k = curves.num_classes();
        Self {
            iou_threshold,
            tp: (0..k).map(|c| curves.tp_total(c)).collect(),
            fp: (0..k).map(|c| curves.fp_total(c)).collect(),
            easy_gt: curves.easy_gt_counts().to_vec(),
        }
    }
}

/// Everything in a run report that depends only on the input and the
/// evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config: ConfigEcho,
    pub thresholds: Vec<ApReport>,
    pub mean_map: f64,
    pub class_totals: Vec<ClassTotals>,
    /// Classes without easy ground truth, left out of every mean.
    pub excluded_classes: Vec<usize>,
}

/// How the run was executed; varies between runs with identical results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub batch_size: usize,
    pub workers: usize,
    pub timing: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub results: RunResults,
    pub execution: Execution,
}

impl RunReport {
    pub fn new(config: &EvalConfig, workers: usize, evaluation: &Evaluation) -> Self {
        let excluded_classes = evaluation
            .thresholds
            .first()
            .map(|t| {
                t.curves
                    .easy_gt_counts()
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c == 0)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default();
        Self {
            results: RunResults {
                config: config.into(),
                thresholds: evaluation
                    .thresholds
                    .iter()
                    .map(|t| t.report.clone())
                    .collect(),
                mean_map: evaluation.mean_map,
                class_totals: evaluation
                    .thresholds
                    .iter()
                    .map(|t| ClassTotals::from_curves(t.report.iou_threshold, &t.curves))
                    .collect(),
                excluded_classes,
            },
            execution: Execution {
                batch_size: config.batch_size,
                workers,
                timing: evaluation.timings.clone(),
            },
        }
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.results.thresholds {
            s.push_str(&format!(
                "mAP@{} ({}): {:.4}",
                r.iou_threshold, r.method, r.map
            ));
            if r.excluded_class_count > 0 {
                s.push_str(&format!(
                    " [{} class(es) without easy ground truth excluded]",
                    r.excluded_class_count
                ));
            }
            s.push('\n');
        }
        if self.results.thresholds.len() > 1 {
            s.push_str(&format!("mean mAP: {:.4}\n", self.results.mean_map));
        }
        s
    }
}

/// Evaluates `dataset` and wraps the outcome in a [`RunReport`].
pub fn run_eval(dataset: &Dataset, config: &EvalConfig, workers: usize) -> Result<RunReport> {
    let evaluation = evaluate(dataset, config, workers)?;
    Ok(RunReport::new(config, workers, &evaluation))
}

/// Why a detection's category differs between the sequential and the
/// batched path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum Explanation {
    /// The sequential path stops at the best same-class match, which is
    /// difficult, and ignores the detection. The batched path zeroes
    /// difficult overlaps first and matches the best easy box instead.
    DifficultOverlap {
        difficult_gt: usize,
        easy_gt: usize,
    },
    /// The ground truth this detection took in the sequential path was
    /// claimed in the batched path by a higher-ranked detection that
    /// diverged under the difficult-overlap rule.
    ClaimedByDivergent {
        gt: usize,
        claimed_by: usize,
    },
    Unexplained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDelta {
    pub image_id: String,
    pub image_index: usize,
    pub slot: usize,
    pub class: usize,
    pub score: f64,
    pub sequential: Category,
    pub parallel: Category,
    pub explanation: Explanation,
}

/// One row of the per-class TP/FP comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub tp_parallel: usize,
    pub tp_sequential: usize,
    /// `|P − S| / S` in percent; `None` when `S = 0` and `P ≠ 0`.
    pub tp_delta_pct: Option<f64>,
    pub fp_parallel: usize,
    pub fp_sequential: usize,
    pub fp_delta_pct: Option<f64>,
}

fn delta_pct(parallel: usize, sequential: usize) -> Option<f64> {
    match (parallel, sequential) {
        (p, s) if p == s => Some(0.0),
        (_, 0) => None,
        (p, s) => Some((p as f64 - s as f64).abs() / s as f64 * 100.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckSummary {
    pub differing_detections: usize,
    pub explained: usize,
    pub unexplained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCrosscheck {
    pub iou_threshold: f64,
    pub map_parallel: f64,
    pub map_sequential: f64,
    pub classes: Vec<ClassDelta>,
    pub deltas: Vec<DetectionDelta>,
    pub summary: CrosscheckSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub config: ConfigEcho,
    pub thresholds: Vec<ThresholdCrosscheck>,
}

impl CrosscheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for t in &self.thresholds {
            s.push_str(&format!(
                "IoU {}: mAP parallel {:.4}, sequential {:.4}; {} differing detection(s), {} unexplained\n",
                t.iou_threshold,
                t.map_parallel,
                t.map_sequential,
                t.summary.differing_detections,
                t.summary.unexplained
            ));
            s.push_str("class  TP(P)  TP(S)  TP(D)   FP(P)  FP(S)  FP(D)\n");
            for c in &t.classes {
                let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}%"));
                s.push_str(&format!(
                    "{:<5}  {:<5}  {:<5}  {:<6}  {:<5}  {:<5}  {}\n",
                    c.class,
                    c.tp_parallel,
                    c.tp_sequential,
                    pct(c.tp_delta_pct),
                    c.fp_parallel,
                    c.fp_sequential,
                    pct(c.fp_delta_pct)
                ));
            }
        }
        s
    }
}

/// Best easy same-class ground truth of a detection (first maximum), as the
/// batched path selects it.
fn easy_target(dataset: &Dataset, image: usize, slot: usize) -> Option<usize> {
    let gt = &dataset.ground_truth()[image];
    let det = &dataset.detections()[image];
    let class = det.labels()[slot];
    let b = det.boxes()[slot].coords();
    let mut best: Option<(usize, f64)> = None;
    for g in 0..gt.len() {
        if gt.labels()[g] != class || gt.difficult()[g] {
            continue;
        }
        let iou = box_iou(b, gt.boxes()[g].coords());
        if best.is_none_or(|(_, v)| iou > v) {
            best = Some((g, iou));
        }
    }
    best.map(|(g, _)| g)
}

fn sequential_map(
    curves: &[crate::oracle::ClassCurve],
    easy: &[usize],
    config: &EvalConfig,
    t: f64,
) -> f64 {
    let aps: Vec<f64> = curves
        .iter()
        .map(|c| match config.ap_method {
            ApMethod::RecallLevels => recall_levels_ap(
                ndarray::ArrayView1::from(&c.precision),
                ndarray::ArrayView1::from(&c.recall),
                &config.recall_levels,
            ),
            _ => ap_step_everypoint(&c.precision, &c.recall),
        })
        .collect();
    ApReport::new(config.ap_method, t, &aps, easy).map
}

/// Compares the sequential reference and the batched pipeline at one
/// threshold, detection by detection.
pub fn crosscheck_threshold(
    dataset: &Dataset,
    config: &EvalConfig,
    t: f64,
) -> Result<ThresholdCrosscheck> {
    let seq = sequential_evaluate(dataset, t, config.epsilon);
    let par = categorize_dataset(dataset, config, t)?;

    let single = EvalConfig {
        iou_thresholds: vec![t],
        ..config.clone()
    };
    let acc = accumulate(dataset, &single, 1)?.remove(0);
    let curves = acc.compute_pr(config.epsilon);
    let aps = crate::ap::class_ap(&curves, config.ap_method, &config.recall_levels);
    let map_parallel = ApReport::new(config.ap_method, t, &aps, curves.easy_gt_counts()).map;
    let map_sequential = sequential_map(&seq.classes, &seq.easy_gt_counts, config, t);

    let k = dataset.num_classes();
    let mut tp_par = vec![0usize; k];
    let mut fp_par = vec![0usize; k];
    let mut deltas = Vec::new();

    for (img, det) in dataset.detections().iter().enumerate() {
        for slot in 0..det.len() {
            let class = det.labels()[slot];
            match par[img][slot] {
                Category::TruePositive => tp_par[class] += 1,
                Category::FalsePositive => fp_par[class] += 1,
                Category::Ignored => {}
            }
            let sequential = seq.outcomes[img][slot].category();
            let parallel = par[img][slot];
            if sequential == parallel {
                continue;
            }
            let explanation = explain(dataset, &seq.outcomes, &par, img, slot);
            deltas.push(DetectionDelta {
                image_id: det.image_id().to_owned(),
                image_index: img,
                slot,
                class,
                score: det.scores()[slot],
                sequential,
                parallel,
                explanation,
            });
        }
    }

    let classes = (0..k)
        .map(|c| ClassDelta {
            class: c,
            tp_parallel: tp_par[c],
            tp_sequential: seq.classes[c].tp,
            tp_delta_pct: delta_pct(tp_par[c], seq.classes[c].tp),
            fp_parallel: fp_par[c],
            fp_sequential: seq.classes[c].fp,
            fp_delta_pct: delta_pct(fp_par[c], seq.classes[c].fp),
        })
        .collect();
    let unexplained = deltas
        .iter()
        .filter(|d| d.explanation == Explanation::Unexplained)
        .count();

    Ok(ThresholdCrosscheck {
        iou_threshold: t,
        map_parallel,
        map_sequential,
        classes,
        summary: CrosscheckSummary {
            differing_detections: deltas.len(),
            explained: deltas.len() - unexplained,
            unexplained,
        },
        deltas,
    })
}

fn is_direct_divergence(
    outcomes: &[Vec<SequentialOutcome>],
    par: &[Vec<Category>],
    img: usize,
    slot: usize,
) -> bool {
    matches!(
        outcomes[img][slot],
        SequentialOutcome::IgnoredDifficult { .. }
    ) && par[img][slot] != Category::Ignored
}

fn explain(
    dataset: &Dataset,
    outcomes: &[Vec<SequentialOutcome>],
    par: &[Vec<Category>],
    img: usize,
    slot: usize,
) -> Explanation {
    if let SequentialOutcome::IgnoredDifficult { gt } = outcomes[img][slot] {
        if par[img][slot] != Category::Ignored {
            if let Some(easy_gt) = easy_target(dataset, img, slot) {
                return Explanation::DifficultOverlap {
                    difficult_gt: gt,
                    easy_gt,
                };
            }
        }
        return Explanation::Unexplained;
    }

    if let (SequentialOutcome::TruePositive { gt }, Category::FalsePositive) =
        (outcomes[img][slot], par[img][slot])
    {
        let det = &dataset.detections()[img];
        let claimer = (0..det.len()).find(|&other| {
            other != slot
                && det.labels()[other] == det.labels()[slot]
                && par[img][other] == Category::TruePositive
                && is_direct_divergence(outcomes, par, img, other)
                && easy_target(dataset, img, other) == Some(gt)
        });
        if let Some(claimed_by) = claimer {
            return Explanation::ClaimedByDivergent { gt, claimed_by };
        }
    }
    Explanation::Unexplained
}

/// Cross-checks every configured threshold.
pub fn run_crosscheck(dataset: &Dataset, config: &EvalConfig) -> Result<CrosscheckReport> {
    config.validate()?;
    let thresholds = config
        .iou_thresholds
        .iter()
        .map(|&t| crosscheck_threshold(dataset, config, t))
        .collect::<Result<_>>()?;
    Ok(CrosscheckReport {
        config: config.into(),
        thresholds,
    })
}

/// Curve points of one class as written by [`export_pr_curves`]: its own
/// detection columns, preceded by `(0, 1)` for the trapezoid method when the
/// class has any detection.
pub fn export_points(curves: &PrCurves, class: usize, method: ApMethod) -> Vec<(f64, f64)> {
    let (p, q) = curves.class_curve(class);
    let mut points = Vec::with_capacity(p.len() + 1);
    if method == ApMethod::Trapezoid && !p.is_empty() {
        points.push((0.0, 1.0));
    }
    points.extend(q.into_iter().zip(p));
    points
}

/// Writes `class_<c>.csv` (`recall,precision`) for every class into `dir`.
pub fn export_pr_curves(curves: &PrCurves, method: ApMethod, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(curves.num_classes());
    for class in 0..curves.num_classes() {
        let path = dir.join(format!("class_{class}.csv"));
        let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(file, "recall,precision")?;
        for (q, p) in export_points(curves, class, method) {
            writeln!(file, "{q},{p}")?;
        }
        file.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Exports the curves of every threshold. A single threshold writes straight
/// into `dir`; several thresholds get one `iou_<t>` subdirectory each.
pub fn export_evaluation(
    evaluation: &Evaluation,
    method: ApMethod,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let many = evaluation.thresholds.len() > 1;
    for t in &evaluation.thresholds {
        let target = if many {
            dir.join(format!("iou_{}", t.report.iou_threshold))
        } else {
            dir.to_path_buf()
        };
        written.extend(export_pr_curves(&t.curves, method, &target)?);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: SyntheticSpec,
    pub iou_thresholds: Vec<f64>,
    pub batch_size: usize,
    pub workers: usize,
    pub images: usize,
    pub detections: usize,
    pub repeat: usize,
    pub sequential_ms: Vec<f64>,
    pub parallel_ms: Vec<f64>,
    pub sequential_median_ms: f64,
    pub parallel_median_ms: f64,
    /// Sequential median over parallel median.
    pub speedup: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Sequential path: per-class loop plus step-curve AP at every threshold.
pub fn time_sequential(dataset: &Dataset, config: &EvalConfig) -> f64 {
    let start = Instant::now();
    for &t in &config.iou_thresholds {
        let r = sequential_evaluate(dataset, t, config.epsilon);
        let aps: Vec<f64> = r
            .classes
            .iter()
            .map(|c| ap_step_everypoint(&c.precision, &c.recall))
            .collect();
        std::hint::black_box(ApReport::new(ApMethod::Step, t, &aps, &r.easy_gt_counts));
    }
    start.elapsed().as_secs_f64() * 1e3
}

/// Batched path: full pipeline with the configured AP method.
pub fn time_parallel(dataset: &Dataset, config: &EvalConfig, workers: usize) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(evaluate(dataset, config, workers)?);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Times both paths on a generated workload `repeat` times each.
pub fn run_bench(
    spec: &SyntheticSpec,
    config: &EvalConfig,
    workers: usize,
    repeat: usize,
) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let dataset = generate(spec)?;
    let config = EvalConfig {
        num_classes: spec.classes,
        ..config.clone()
    };
    config.validate()?;

    let mut sequential_ms = Vec::with_capacity(repeat);
    let mut parallel_ms = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        sequential_ms.push(time_sequential(&dataset, &config));
        parallel_ms.push(time_parallel(&dataset, &config, workers)?);
    }
    let sequential_median_ms = median(&sequential_ms);
    let parallel_median_ms = median(&parallel_ms);
    Ok(BenchReport {
        spec: spec.clone(),
        iou_thresholds: config.iou_thresholds.clone(),
        batch_size: config.batch_size,
        workers,
        images: dataset.len(),
        detections: dataset.detections().iter().map(|d| d.len()).sum(),
        repeat,
        sequential_ms,
        parallel_ms,
        sequential_median_ms,
        parallel_median_ms,
        speedup: sequential_median_ms / parallel_median_ms.max(f64::MIN_POSITIVE),
    })
}
