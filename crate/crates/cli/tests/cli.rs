use std::path::Path;
use std::process::{Command, Output};

use bdq_core::calibration::TRACE_COLUMNS;
use bdq_core::harness::{ComparisonReport, COMPARE_COLUMNS};
use bdq_core::quantizer::QuantizedTensor;
use bdq_core::transforms::TransformPair;
use bdq_core::Matrix;

fn bdq(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdq"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn bdq")
}

fn ok(args: &[&str], dir: &Path) -> Vec<u8> {
    let out = bdq(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

const GEN: [&str; 10] = ["gen", "64", "64", "--sigma", "1", "--k", "100", "--outlier-frac", "0.001", "--seed"];

#[test]
fn gen_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = GEN.to_vec();
    a.extend(["1", "--out", "a.bdq1"]);
    let mut b = GEN.to_vec();
    b.extend(["1", "--out", "b.bdq1"]);
    ok(&a, dir.path());
    ok(&b, dir.path());
    let bytes = std::fs::read(dir.path().join("a.bdq1")).unwrap();
    assert_eq!(bytes, std::fs::read(dir.path().join("b.bdq1")).unwrap());
    assert_eq!(&bytes[..4], b"BDQ1");
    assert_eq!(bytes.len(), 12 + 64 * 64 * 8);
    let m = Matrix::load_bdq1(dir.path().join("a.bdq1")).unwrap();
    assert_eq!(m.to_bdq1_bytes(), bytes);
}

#[test]
fn empty_outlier_set_ignores_k() {
    let dir = tempfile::tempdir().unwrap();
    let big = ok(&["gen", "8", "8", "--k", "100", "--outlier-frac", "0", "--seed", "4"], dir.path());
    let one = ok(&["gen", "8", "8", "--k", "1", "--seed", "4"], dir.path());
    assert_eq!(big, one);
    assert_eq!(&big[..4], b"BDQ1");
}

#[test]
fn csv_matrix_input_and_grid_aligned_none() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.csv"), "7,-3\n0,5\n").unwrap();
    let json = ok(&["compare", "g.csv", "--pipelines", "none,diag"], dir.path());
    let report: ComparisonReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(report.pipelines.len(), 2);
    assert_eq!(report.pipelines[0].weight_mse, 0.0);
    assert!(report.profile.is_none());
}

#[test]
fn compare_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["compare", "--k", "50", "--outlier-frac", "0.01", "--rows", "16", "--cols", "8", "--out", "r.json"],
        dir.path(),
    );
    let report: ComparisonReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report.pipelines.len(), 5);
    assert_eq!(report.dims, [16, 8]);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), COMPARE_COLUMNS);
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn compare_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdq(&["compare", "--pipelines", "none,magic"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let out = bdq(&["compare", "--rows", "12", "--cols", "4", "--pipelines", "rot"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = bdq(&["compare", "missing.bdq1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bdq(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(bdq(&["gen", "4"], dir.path()).status.code(), Some(1));
    assert_eq!(bdq(&["--format", "xml", "validate"], dir.path()).status.code(), Some(1));
    assert_eq!(bdq(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn validate_exit_status_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdq(&["validate", "transforms"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"equivalence_rel_deviation"));
    let csv = ok(&["validate", "transforms", "--format", "csv"], dir.path());
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("suite,name,measured,comparison,tolerance,passed\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn quantize_saves_codes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "8", "6", "--seed", "2", "--out", "w.bdq1"], dir.path());
    let json = ok(
        &["quantize", "w.bdq1", "--bits", "3", "--mode", "min_max_affine", "--granularity", "per_row", "--codes", "w.bdqi"],
        dir.path(),
    );
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["scales"].as_array().unwrap().len(), 8);
    let q = QuantizedTensor::load(dir.path().join("w.bdqi")).unwrap();
    assert_eq!((q.rows, q.cols), (8, 6));
    assert!(v["weight_mse"].as_f64().unwrap() > 0.0);
}

#[test]
fn flatness_and_transform_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "16", "16", "--k", "50", "--outlier-frac", "0.02", "--seed", "3", "--out", "w.bdq1"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&ok(&["flatness", "w.bdq1"], dir.path())).unwrap();
    assert!(v["state"]["F"].as_f64().unwrap() < v["flatness_before"].as_f64().unwrap());
    assert_eq!(v["state"]["converged"], true);
    ok(
        &["transform", "w.bdq1", "--pipeline", "bdq", "--pair-out", "p.json", "--weight-out", "t.bdq1", "--seed", "5"],
        dir.path(),
    );
    let pair = TransformPair::load(dir.path().join("p.json")).unwrap();
    let w = Matrix::load_bdq1(dir.path().join("w.bdq1")).unwrap();
    let t = Matrix::load_bdq1(dir.path().join("t.bdq1")).unwrap();
    assert_eq!(pair.rotation_meta.seed, Some(5));
    assert!(pair.restore_weight(&t).unwrap().max_abs_diff(&w).unwrap() < 1e-9 * w.max_abs());
}

fn trace(dir: &Path, extra: &[&str], name: &str) -> String {
    let mut args = vec!["calibrate", "--calib-size", "32", "--heldout-size", "32", "--format", "csv"];
    args.extend_from_slice(extra);
    args.extend(["--out", name]);
    ok(&args, dir);
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn calibrate_traces_share_schema() {
    let dir = tempfile::tempdir().unwrap();
    let ce = trace(dir.path(), &["--loss", "ce", "--seed", "1", "--epochs", "5"], "ce.csv");
    let rce = trace(dir.path(), &["--loss", "rce", "--seed", "1", "--epochs", "5"], "rce.csv");
    assert_eq!(ce.lines().next(), Some(TRACE_COLUMNS));
    assert_eq!(rce.lines().next(), Some(TRACE_COLUMNS));
    assert_eq!(ce.lines().count(), 7);
    assert_eq!(rce.lines().count(), 7);
    assert_ne!(ce, rce);
    let pairs: Vec<TransformPair> =
        serde_json::from_slice(&std::fs::read(dir.path().join("ce.pairs.json")).unwrap()).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.rotation_path.is_some()));
}

#[test]
fn rce_at_delta_one_tracks_ce_minus_entropy() {
    // at delta = 1 the RCE objective is CE(q, p) - H(p); its row-0 loss must
    // be the CE loss minus a nonnegative entropy
    let dir = tempfile::tempdir().unwrap();
    let ce = trace(dir.path(), &["--loss", "ce", "--seed", "2", "--epochs", "0"], "ce.csv");
    let rce = trace(dir.path(), &["--loss", "rce", "--delta", "1.0", "--seed", "2", "--epochs", "0"], "rce.csv");
    let first = |t: &str| -> f64 { t.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap() };
    assert!(first(&rce) < first(&ce));
}

#[test]
fn report_end_to_end_csv() {
    let dir = tempfile::tempdir().unwrap();
    let text = String::from_utf8(ok(&["report", "end_to_end", "--seeds", "2", "--format", "csv"], dir.path())).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed,none,rot,bdq,diverged");
    assert_eq!(lines.len(), 3);
}
