//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use detmap::ap::{ap_step_everypoint, class_ap, recall_levels_ap};
use detmap::cli::{load, InputArgs};
use detmap::ingest::{build_det_batch, pad_gt_batch};
use detmap::matcher::pairwise_iou;
use detmap::model::eleven_point_levels;
use detmap::pipeline::accumulate;
use detmap::report::{run_crosscheck, run_eval, time_parallel, time_sequential, Explanation};
use detmap::{
    generate, sequential_evaluate, ApMethod, BBox, EvalConfig, ImageDetections, ImageGroundTruth,
    SyntheticSpec,
};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Random small instance: up to 20 images, up to 5 classes, up to 10 ground
/// truths per image, with a chance of tied scores and exact duplicates.
fn random_spec(seed: u64, difficult_prob: f64, discard_prob: f64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    SyntheticSpec {
        seed,
        images: rng.gen_range(1..=20),
        classes: rng.gen_range(1..=5),
        gts_per_image: (0, 10),
        dets_per_gt: (0, rng.gen_range(1..=3)),
        jitter: rng.gen_range(0..=8),
        score_levels: [0, 3, 10][rng.gen_range(0..3)],
        difficult_prob,
        discard_prob,
        false_detection_rate: rng.gen_range(0.0..0.6),
        canvas: 64,
        box_size: (4, 32),
    }
}

fn oracle_equivalence() -> Outcome {
    let instances = 1000;
    let mut detections = 0;
    for seed in 0..instances {
        let spec = random_spec(seed, 0.0, 0.0);
        let ds = generate(&spec).map_err(|e| e.to_string())?;
        detections += ds.detections().iter().map(|d| d.len()).sum::<usize>();
        for t in [0.5, 0.75] {
            let config = EvalConfig {
                iou_thresholds: vec![t],
                batch_size: 1 + (seed as usize % 8),
                ..EvalConfig::new(spec.classes)
            };
            let pr = accumulate(&ds, &config, 1).map_err(|e| e.to_string())?[0]
                .compute_pr(config.epsilon);
            let seq = sequential_evaluate(&ds, t, config.epsilon);
            for (c, s) in seq.classes.iter().enumerate() {
                if (pr.tp_total(c), pr.fp_total(c)) != (s.tp, s.fp) {
                    return Err(format!(
                        "seed {seed} t {t} class {c}: parallel TP/FP {}/{} vs sequential {}/{}",
                        pr.tp_total(c),
                        pr.fp_total(c),
                        s.tp,
                        s.fp
                    ));
                }
                let (p, q) = pr.class_curve(c);
                let close = |a: &[f64], b: &[f64]| {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
                };
                if !close(&p, &s.precision) || !close(&q, &s.recall) {
                    return Err(format!("seed {seed} t {t} class {c}: curves differ"));
                }
            }
        }
    }
    Ok(format!(
        "{instances} instances x 2 thresholds, {detections} detections; TP/FP equal, curves within 1e-12"
    ))
}

fn divergence_characterization() -> Outcome {
    let instances = 1000;
    let (mut total, mut direct, mut cascade, mut unexplained) = (0, 0, 0, 0);
    for seed in 0..instances {
        let spec = random_spec(10_000 + seed, 0.3, 0.1);
        let ds = generate(&spec).map_err(|e| e.to_string())?;
        let config = EvalConfig::new(spec.classes);
        let report = run_crosscheck(&ds, &config).map_err(|e| e.to_string())?;
        for d in &report.thresholds[0].deltas {
            total += 1;
            match d.explanation {
                Explanation::DifficultOverlap { .. } => direct += 1,
                Explanation::ClaimedByDivergent { .. } => cascade += 1,
                Explanation::Unexplained => unexplained += 1,
            }
        }
    }
    let detail = format!(
        "{instances} instances, {total} differing detections: {direct} difficult-overlap, {cascade} claimed-by-divergent, {unexplained} unexplained"
    );
    if total == 0 {
        Err(format!("{detail} (workload never exercised the rule)"))
    } else if unexplained > 0 {
        Err(detail)
    } else {
        Ok(detail)
    }
}

fn batch_invariance() -> Outcome {
    let instances = 100;
    for seed in 0..instances {
        let spec = random_spec(20_000 + seed, 0.2, 0.1);
        let ds = generate(&spec).map_err(|e| e.to_string())?;
        let method =
            [ApMethod::Trapezoid, ApMethod::Step, ApMethod::RecallLevels][seed as usize % 3];
        let base = EvalConfig {
            iou_thresholds: vec![0.5, 0.75],
            ap_method: method,
            ..EvalConfig::new(spec.classes)
        };
        let mut reference = None;
        for (batch_size, workers) in [(1, 1), (2, 1), (7, 1), (ds.len(), 1), (2, 3)] {
            let config = EvalConfig {
                batch_size,
                ..base.clone()
            };
            let results = run_eval(&ds, &config, workers)
                .map_err(|e| e.to_string())?
                .results;
            match &reference {
                None => reference = Some(results),
                Some(r) if *r != results => {
                    return Err(format!(
                        "seed {seed}: batch size {batch_size} with {workers} worker(s) changed the report"
                    ))
                }
                Some(_) => {}
            }
        }
    }
    Ok(format!(
        "{instances} instances, batch sizes 1/2/7/g (and 2 on 3 workers) give identical reports"
    ))
}

fn worked_examples() -> Outcome {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let ds = load(&InputArgs {
        gt: data.join("micro_gt.jsonl"),
        det: data.join("micro_det.jsonl"),
        classes: None,
    })
    .map_err(|e| e.to_string())?;
    let config = EvalConfig::new(2);
    let eval = detmap::evaluate(&ds, &config, 1).map_err(|e| e.to_string())?;
    let curves = &eval.thresholds[0].curves;
    for c in 0..2 {
        if curves.class_curve(c) != (vec![1.0, 0.5], vec![1.0, 1.0]) {
            return Err(format!("class {c} curve {:?}", curves.class_curve(c)));
        }
    }
    let aps = class_ap(curves, ApMethod::Trapezoid, &[]);
    if aps != [1.0, 1.0] || eval.mean_map != 1.0 {
        return Err(format!("trapezoid APs {aps:?}, mAP {}", eval.mean_map));
    }

    let p = [1.0, 0.5, 2.0 / 3.0];
    let q = [0.5, 0.5, 1.0];
    let step = ap_step_everypoint(&p, &q);
    if (step - 5.0 / 6.0).abs() > 1e-12 {
        return Err(format!("step AP {step}"));
    }
    let eleven = recall_levels_ap(
        ndarray::ArrayView1::from(&p),
        ndarray::ArrayView1::from(&q),
        &eleven_point_levels(),
    );
    if (eleven - 0.8485).abs() > 1e-4 {
        return Err(format!("11-point AP {eleven}"));
    }
    Ok(format!(
        "micro-instance P [1, 0.5] R [1, 1], AP [1, 1], mAP 1; step {step:.12}; 11-point {eleven:.6}"
    ))
}

fn ap_bounds() -> Outcome {
    let instances = 500;
    let mut checked = 0;
    for seed in 0..instances {
        let spec = random_spec(30_000 + seed, 0.2, 0.1);
        let ds = generate(&spec).map_err(|e| e.to_string())?;
        let config = EvalConfig {
            iou_thresholds: vec![0.3, 0.5, 0.75],
            batch_size: 4,
            ..EvalConfig::new(spec.classes)
        };
        let eval = detmap::evaluate(&ds, &config, 1).map_err(|e| e.to_string())?;
        for t in &eval.thresholds {
            let pr = &t.curves;
            for method in [ApMethod::Trapezoid, ApMethod::Step, ApMethod::RecallLevels] {
                for (c, ap) in class_ap(pr, method, &config.recall_levels)
                    .iter()
                    .enumerate()
                {
                    checked += 1;
                    if !(0.0..=1.0).contains(ap) {
                        return Err(format!("seed {seed} class {c} {method} AP {ap}"));
                    }
                }
            }
            for (c, row) in pr.recall().outer_iter().enumerate() {
                if row.windows(2).into_iter().any(|w| w[1] < w[0]) {
                    return Err(format!("seed {seed} class {c}: recall decreases"));
                }
                if pr.tp_total(c) > pr.easy_gt_counts()[c] {
                    return Err(format!(
                        "seed {seed} class {c}: TP exceeds easy ground truth"
                    ));
                }
            }
            if !(0.0..=1.0).contains(&t.report.map) {
                return Err(format!("seed {seed}: mAP {}", t.report.map));
            }
        }
    }
    Ok(format!(
        "{instances} instances x 3 thresholds, {checked} class APs in [0, 1], recall monotone, TP <= easy count"
    ))
}

fn pixel_iou(a: [i64; 4], b: [i64; 4]) -> BigRational {
    let inside = |r: [i64; 4], x: i64, y: i64| r[0] <= x && x <= r[2] && r[1] <= y && y <= r[3];
    let (mut inter, mut union) = (0i64, 0i64);
    for y in a[1].min(b[1])..=a[3].max(b[3]) {
        for x in a[0].min(b[0])..=a[2].max(b[2]) {
            match (inside(a, x, y), inside(b, x, y)) {
                (true, true) => {
                    inter += 1;
                    union += 1;
                }
                (true, false) | (false, true) => union += 1,
                _ => {}
            }
        }
    }
    BigRational::new(inter.into(), union.into())
}

fn iou_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let random_box = |rng: &mut ChaCha8Rng| {
        let (x0, x1) = (rng.gen_range(0..64), rng.gen_range(0..64));
        let (y0, y1) = (rng.gen_range(0..64), rng.gen_range(0..64));
        [x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)]
    };
    let (images, per_image) = (4, 50);
    let tolerance = BigRational::new(1.into(), 1_000_000_000_000i64.into());
    let (mut pairs, mut exact) = (0, 0);
    for _round in 0..2 {
        let mut det_boxes = Vec::new();
        let mut gt_boxes = Vec::new();
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for i in 0..images {
            let d: Vec<[i64; 4]> = (0..per_image).map(|_| random_box(&mut rng)).collect();
            let g: Vec<[i64; 4]> = (0..per_image).map(|_| random_box(&mut rng)).collect();
            let to_bbox = |c: &[i64; 4]| {
                BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
            };
            dets.push(
                ImageDetections::kept(
                    format!("i{i}"),
                    d.iter().map(to_bbox).collect(),
                    vec![0; per_image],
                    vec![0.5; per_image],
                )
                .unwrap(),
            );
            gts.push(
                ImageGroundTruth::new(
                    format!("i{i}"),
                    g.iter().map(to_bbox).collect(),
                    vec![0; per_image],
                    vec![false; per_image],
                )
                .unwrap(),
            );
            det_boxes.push(d);
            gt_boxes.push(g);
        }
        let det = build_det_batch(&dets, per_image).map_err(|e| e.to_string())?;
        let gt = pad_gt_batch(&gts, per_image, 1).map_err(|e| e.to_string())?;
        let iou = pairwise_iou(&det, &gt).map_err(|e| e.to_string())?;
        for (i, dets_i) in det_boxes.iter().enumerate() {
            for (j, &a) in dets_i.iter().enumerate() {
                for (l, &b) in gt_boxes[i].iter().enumerate() {
                    let got = iou.values()[[i, j, l]];
                    let want = pixel_iou(a, b);
                    let got_exact = BigRational::from_float(got).ok_or("non-finite IoU")?;
                    pairs += 1;
                    if got_exact == want {
                        exact += 1;
                    } else if (&got_exact - &want > tolerance) || (&want - &got_exact > tolerance) {
                        return Err(format!("{a:?} vs {b:?}: kernel {got}, pixel count {want}"));
                    }
                }
            }
        }
    }
    Ok(format!(
        "{pairs} box pairs match pixel counts within 1e-12 ({exact} bit-exact rationals)"
    ))
}

fn performance_smoke() -> Outcome {
    let spec = SyntheticSpec {
        seed: 7,
        images: 10_000,
        gts_per_image: (10, 10),
        dets_per_gt: (2, 2),
        false_detection_rate: 0.0,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).map_err(|e| e.to_string())?;
    let dets: usize = ds.detections().iter().map(|d| d.len()).sum();
    let config = EvalConfig::new(spec.classes);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    time_sequential(&ds, &config);
    time_parallel(&ds, &config, workers).map_err(|e| e.to_string())?;
    let mut seq = Vec::new();
    let mut par = Vec::new();
    for _ in 0..5 {
        seq.push(time_sequential(&ds, &config));
        par.push(time_parallel(&ds, &config, workers).map_err(|e| e.to_string())?);
    }
    seq.sort_by(f64::total_cmp);
    par.sort_by(f64::total_cmp);
    let (s, p) = (seq[2], par[2]);
    let detail = format!(
        "{} images, {} classes, {dets} detections, {workers} worker(s): median sequential {s:.0} ms, batched {p:.0} ms, speedup {:.2}x",
        ds.len(),
        spec.classes,
        s / p
    );
    if p <= s {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("oracle equivalence", oracle_equivalence),
        ("divergence characterization", divergence_characterization),
        ("batch invariance", batch_invariance),
        ("worked examples", worked_examples),
        ("AP bounds and monotonicity", ap_bounds),
        ("IoU kernel vs pixel count", iou_kernel),
        ("performance smoke", performance_smoke),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
