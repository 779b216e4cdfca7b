use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn detmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn micro(sub: &str, extra: &[&str]) -> Output {
    let gt = data("micro_gt.jsonl");
    let det = data("micro_det.jsonl");
    let mut args = vec![
        sub,
        "--gt",
        gt.to_str().unwrap(),
        "--det",
        det.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    detmap(&args)
}

fn without_execution(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("execution");
    v
}

#[test]
fn eval_on_the_micro_fixture() {
    let v = json(&micro("eval", &[]));
    assert_eq!(
        v["thresholds"][0]["per_class_ap"],
        serde_json::json!([1.0, 1.0])
    );
    assert_eq!(v["mean_map"], 1.0);
    assert_eq!(v["class_totals"][0]["tp"], serde_json::json!([1, 1]));
    assert_eq!(v["class_totals"][0]["fp"], serde_json::json!([1, 1]));
}

#[test]
fn eval_report_matches_golden_file() {
    let v = json(&micro(
        "eval",
        &["--iou-thresholds", "0.5,0.75", "--ap-method", "step"],
    ));
    let golden: Value =
        serde_json::from_str(&fs::read_to_string(data("eval_micro_golden.json")).unwrap()).unwrap();
    assert_eq!(without_execution(v), golden);
}

#[test]
fn several_thresholds_give_one_report_each() {
    let v = json(&micro("eval", &["--iou-thresholds", "0.5,0.75"]));
    let reports = v["thresholds"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["iou_threshold"], 0.75);
    assert_eq!(v["mean_map"], 0.75);
}

#[test]
fn batch_size_only_changes_the_execution_block() {
    let reports: Vec<Value> = ["1", "2", "3"]
        .iter()
        .map(|n| without_execution(json(&micro("eval", &["--batch-size", n]))))
        .collect();
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

#[test]
fn empty_detections_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("det.jsonl");
    fs::write(&det, "").unwrap();
    let gt = data("micro_gt.jsonl");
    let v = json(&detmap(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--det",
        det.to_str().unwrap(),
    ]));
    assert_eq!(v["mean_map"], 0.0);
    assert_eq!(v["class_totals"][0]["tp"], serde_json::json!([0, 0]));
    assert_eq!(v["class_totals"][0]["fp"], serde_json::json!([0, 0]));
}

#[test]
fn output_flag_writes_the_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = micro("eval", &["--output", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["mean_map"], 1.0);
}

#[test]
fn crosscheck_flags_the_difficult_overlap() {
    let gt = data("difficult_gt.jsonl");
    let det = data("difficult_det.jsonl");
    let v = json(&detmap(&[
        "crosscheck",
        "--gt",
        gt.to_str().unwrap(),
        "--det",
        det.to_str().unwrap(),
    ]));
    let t = &v["thresholds"][0];
    let deltas = t["deltas"].as_array().unwrap();
    assert_eq!(deltas.len(), 1);
    assert_eq!(deltas[0]["sequential"], "ignored");
    assert_eq!(deltas[0]["parallel"], "true-positive");
    assert_eq!(deltas[0]["explanation"]["rule"], "difficult-overlap");
    assert_eq!(t["summary"]["unexplained"], 0);
    assert_eq!(t["map_parallel"], 1.0);
    assert_eq!(t["map_sequential"], 0.0);
}

#[test]
fn crosscheck_agrees_on_the_micro_fixture_and_is_stable() {
    let a = micro("crosscheck", &["--iou-thresholds", "0.5,0.75"]);
    let b = micro("crosscheck", &["--iou-thresholds", "0.5,0.75"]);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    for t in v["thresholds"].as_array().unwrap() {
        assert!(t["deltas"].as_array().unwrap().is_empty());
        assert_eq!(t["map_parallel"], t["map_sequential"]);
    }
}

#[test]
fn export_pr_writes_one_csv_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = micro("export-pr", &["--out-dir", out, "--classes", "3"]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let class0 = fs::read_to_string(dir.path().join("class_0.csv")).unwrap();
    assert_eq!(class0, "recall,precision\n0,1\n1,1\n1,0.5\n");
    let class2 = fs::read_to_string(dir.path().join("class_2.csv")).unwrap();
    assert_eq!(class2, "recall,precision\n");

    let again = tempfile::tempdir().unwrap();
    micro(
        "export-pr",
        &[
            "--out-dir",
            again.path().to_str().unwrap(),
            "--classes",
            "3",
        ],
    );
    for c in 0..3 {
        let name = format!("class_{c}.csv");
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(again.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn export_pr_splits_thresholds_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = micro(
        "export-pr",
        &["--out-dir", out, "--iou-thresholds", "0.5,0.75"],
    );
    assert!(run.status.success());
    let dirs: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        assert!(d.join("class_0.csv").exists());
        assert!(d.join("class_1.csv").exists());
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn malformed_records_exit_with_one_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("det.jsonl");
    fs::write(
        &det,
        "{\"image_id\":\"A\",\"boxes\":[],\"labels\":[],\"scores\":[]}\n{not json\n",
    )
    .unwrap();
    let gt = data("micro_gt.jsonl");
    let out = detmap(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--det",
        det.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn unknown_image_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("det.jsonl");
    fs::write(
        &det,
        "{\"image_id\":\"nowhere\",\"boxes\":[],\"labels\":[],\"scores\":[]}\n",
    )
    .unwrap();
    let gt = data("micro_gt.jsonl");
    let out = detmap(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--det",
        det.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere"));
}

#[test]
fn configuration_errors_exit_with_two() {
    assert_eq!(
        micro("eval", &["--iou-thresholds", "1.5"]).status.code(),
        Some(2)
    );
    assert_eq!(
        micro("eval", &["--ap-method", "bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(micro("eval", &["--batch-size", "0"]).status.code(), Some(2));
    assert_eq!(
        micro("eval", &["--recall-levels", "0:1:0"]).status.code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let e = empty.to_str().unwrap();
    let out = detmap(&["eval", "--gt", e, "--det", e]);
    assert_eq!(out.status.code(), Some(2));
    let out = detmap(&["eval", "--gt", e, "--det", e, "--classes", "2"]);
    assert!(out.status.success());

    let missing = dir.path().join("missing.jsonl");
    let out = detmap(&["eval", "--gt", missing.to_str().unwrap(), "--det", e]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_every_repetition() {
    let v = json(&detmap(&[
        "bench",
        "--images",
        "50",
        "--dets-per-gt",
        "3",
        "--repeat",
        "5",
        "--workers",
        "1",
    ]));
    assert_eq!(v["images"], 50);
    assert_eq!(v["sequential_ms"].as_array().unwrap().len(), 5);
    assert_eq!(v["parallel_ms"].as_array().unwrap().len(), 5);
    assert!(v["speedup"].as_f64().unwrap() > 0.0);
}
