//! Command-line interface: `eval`, `crosscheck`, `bench` and `export-pr`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ap::parse_recall_levels;
use crate::error::{Error, Result};
use crate::ingest::{infer_num_classes, parse_detections, parse_ground_truth, Dataset};
use crate::model::{ApMethod, EvalConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPSILON};
use crate::oracle::SyntheticSpec;
use crate::pipeline::evaluate;
use crate::report::{export_evaluation, run_bench, run_crosscheck, RunReport};

#[derive(Debug, Parser)]
#[command(
    name = "detmap",
    version,
    about = "Batched mean average precision for object detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate detections against ground truth.
    Eval {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write per-class PR curves into this directory.
        #[arg(long, value_name = "DIR")]
        export_pr: Option<PathBuf>,
    },
    /// Compare the sequential reference with the batched pipeline.
    Crosscheck {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Time both paths on a generated workload.
    Bench(BenchArgs),
    /// Write per-class PR curves as CSV files.
    ExportPr {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Ground-truth file, one JSON record per line.
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    /// Detection file, one JSON record per line.
    #[arg(long, value_name = "PATH")]
    pub det: PathBuf,
    /// Number of classes; inferred from the largest label when omitted.
    #[arg(long, value_name = "K")]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated IoU thresholds.
    #[arg(
        long,
        value_name = "LIST",
        default_value = "0.5",
        value_delimiter = ','
    )]
    pub iou_thresholds: Vec<f64>,
    #[arg(long, value_name = "METHOD", default_value = "trapezoid")]
    pub ap_method: ApMethod,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, value_name = "SPEC", default_value = "0:1:0.1")]
    pub recall_levels: String,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, value_name = "X", default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Ground truths per image, `N` or `MIN:MAX`.
    #[arg(long, value_name = "RANGE", default_value = "0:10", value_parser = parse_range)]
    pub gts_per_image: (usize, usize),
    /// Detections per ground truth, `N` or `MIN:MAX`.
    #[arg(long, value_name = "RANGE", default_value = "1:2", value_parser = parse_range)]
    pub dets_per_gt: (usize, usize),
    #[arg(long, default_value_t = 0.1)]
    pub difficult_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    pub discard_prob: f64,
    #[arg(long, default_value_t = 0.3)]
    pub false_detection_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[command(flatten)]
    pub eval: EvalArgs,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(':') {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => num(s).map(|n| (n, n)),
    }
}

impl EvalArgs {
    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }

    fn config(&self, num_classes: usize) -> Result<EvalConfig> {
        let config = EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
            ap_method: self.ap_method,
            recall_levels: parse_recall_levels(&self.recall_levels)?,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            ..EvalConfig::new(num_classes)
        };
        config.validate()?;
        Ok(config)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

/// Reads both input files and resolves the class count.
pub fn load(input: &InputArgs) -> Result<Dataset> {
    let gt = parse_ground_truth(open(&input.gt)?)?;
    let det = parse_detections(open(&input.det)?)?;
    let k = match (input.classes, infer_num_classes(&gt, &det)) {
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => {
            return Err(Error::Config(
                "cannot infer the class count from empty inputs; pass --classes".into(),
            ))
        }
    };
    Dataset::new(gt, det, k)
}

fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(io::Error::from)?;
    match output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{json}")?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval {
            input,
            eval,
            export_pr,
        } => {
            let start = Instant::now();
            let dataset = load(&input)?;
            let parse_ms = start.elapsed().as_secs_f64() * 1e3;
            let config = eval.config(dataset.num_classes())?;
            let workers = eval.workers();
            let mut evaluation = evaluate(&dataset, &config, workers)?;
            evaluation.timings.parse_ms = parse_ms;
            if let Some(dir) = export_pr {
                export_evaluation(&evaluation, config.ap_method, &dir)?;
            }
            let report = RunReport::new(&config, workers, &evaluation);
            eprint!("{}", report.summary());
            emit(&report, eval.output.as_deref())
        }
        Command::Crosscheck { input, eval } => {
            let dataset = load(&input)?;
            let config = eval.config(dataset.num_classes())?;
            let report = run_crosscheck(&dataset, &config)?;
            eprint!("{}", report.summary());
            emit(&report, eval.output.as_deref())
        }
        Command::Bench(args) => {
            let spec = SyntheticSpec {
                seed: args.seed,
                images: args.images,
                classes: args.classes,
                gts_per_image: args.gts_per_image,
                dets_per_gt: args.dets_per_gt,
                difficult_prob: args.difficult_prob,
                discard_prob: args.discard_prob,
                false_detection_rate: args.false_detection_rate,
                ..SyntheticSpec::default()
            };
            let config = args.eval.config(args.classes)?;
            let report = run_bench(&spec, &config, args.eval.workers(), args.repeat)?;
            eprintln!(
                "{} images, {} detections: sequential {:.1} ms, batched {:.1} ms, speedup {:.2}x",
                report.images,
                report.detections,
                report.sequential_median_ms,
                report.parallel_median_ms,
                report.speedup
            );
            emit(&report, args.eval.output.as_deref())
        }
        Command::ExportPr {
            input,
            eval,
            out_dir,
        } => {
            let dataset = load(&input)?;
            let config = eval.config(dataset.num_classes())?;
            let evaluation = evaluate(&dataset, &config, eval.workers())?;
            let written = export_evaluation(&evaluation, config.ap_method, &out_dir)?;
            eprintln!(
                "wrote {} curve file(s) to {}",
                written.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("3"), Ok((3, 3)));
        assert_eq!(parse_range("1:4"), Ok((1, 4)));
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
