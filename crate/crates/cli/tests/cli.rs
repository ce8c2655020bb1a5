//! End-to-end runs of the `relprop` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relprop::eval::{Dataset, DatasetManifest};
use relprop::model_io::read_contributions;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn relprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relprop")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// First `n` records of the square dataset, written to a fresh manifest.
fn small_dataset(dir: &Path, n: usize) -> PathBuf {
    let all = Dataset::load(fixtures().join("squares/dataset.json")).unwrap();
    let manifest = DatasetManifest {
        percentages: None,
        records: all.records[..n].to_vec(),
    };
    let out = dir.join("small.json");
    fs::write(&out, serde_json::to_string(&manifest).unwrap()).unwrap();
    out
}

fn model_args(name: &str) -> [String; 2] {
    ["--model".into(), fixtures().join(format!("{name}.json")).display().to_string()]
}

#[test]
fn explain_writes_contributions_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixtures().join("squares/img_0000.ppm");
    let [m, model] = model_args("square_detector");
    let o = relprop(&["explain", &m, &model, "--image", path(&image), "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));

    let masks: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("mask_"))
        .collect();
    assert_eq!(masks.len(), 15, "{masks:?}");
    assert!(masks.iter().all(|n| n.ends_with(".pgm")));

    let (values, sidecar) = read_contributions(dir.path().join("contributions.bin"), dir.path().join("contributions.json")).unwrap();
    assert_eq!(values.shape(), &[16, 16, 3]);
    assert_eq!(sidecar.shape, vec![16, 16, 3]);
    assert!(values.is_finite());

    // same run, same bytes
    let again = tempfile::tempdir().unwrap();
    let o = relprop(&["explain", &m, &model, "--image", path(&image), "--out", path(again.path())]);
    assert!(o.status.success());
    for name in masks.iter().map(String::as_str).chain(["contributions.bin"]) {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn full_percentage_mask_is_all_white() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixtures().join("squares/img_0001.ppm");
    let [m, model] = model_args("square_detector");
    let o = relprop(&[
        "explain", &m, &model, "--image", path(&image), "--percentages", "100", "--mode", "input-abs", "--out",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("mask_100.ppm")).unwrap();
    let pixels = &bytes[bytes.len() - 16 * 16 * 3..];
    assert!(pixels.iter().all(|&b| b == 255));
}

#[test]
fn lrp0_on_cancelling_network_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixtures().join("constant_2x2.ppm");
    let [m, model] = model_args("zero_denominator");
    let o = relprop(&["explain", &m, &model, "--image", path(&image), "--method", "lrp0", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("GuardedDenominator"), "{}", stderr(&o));

    let o = relprop(&["explain", &m, &model, "--image", path(&image), "--method", "rlrp", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn exit_codes_separate_usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixtures().join("squares/img_0000.ppm");
    let [m, model] = model_args("square_detector");
    let out = path(dir.path());

    assert_eq!(relprop(&["explain", "--bogus"]).status.code(), Some(1));
    assert_eq!(relprop(&[]).status.code(), Some(1));
    assert_eq!(relprop(&["--help"]).status.code(), Some(0));
    let bad_method = relprop(&["explain", &m, &model, "--image", path(&image), "--method", "lrp9", "--out", out]);
    assert_eq!(bad_method.status.code(), Some(1));
    let bad_pct = relprop(&["explain", &m, &model, "--image", path(&image), "--percentages", "20,10", "--out", out]);
    assert_eq!(bad_pct.status.code(), Some(1));
    let bad_mode = relprop(&["explain", &m, &model, "--image", path(&image), "--mode", "sideways", "--out", out]);
    assert_eq!(bad_mode.status.code(), Some(1));
    let bad_gamma = relprop(&["explain", &m, &model, "--image", path(&image), "--method", "lrp-gamma", "--gamma", "-1", "--out", out]);
    assert_eq!(bad_gamma.status.code(), Some(1));

    let missing = relprop(&["explain", "--model", "/nonexistent/model.json", "--image", path(&image), "--out", out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).starts_with("error: "));
    let no_image = relprop(&["explain", &m, &model, "--image", "/nonexistent.ppm", "--out", out]);
    assert_eq!(no_image.status.code(), Some(2));
}

#[test]
fn eval_writes_one_row_per_method_percentage_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path(), 40);
    let csv = dir.path().join("eval.csv");
    let [m, model] = model_args("square_detector");
    let o = relprop(&[
        "eval", &m, &model, "--dataset", path(&dataset), "--method", "rlrp,random", "--percentages", "10,50,100",
        "--out", path(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,mode,percentage,metric,value,n_images,n_skipped"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for method in ["rlrp", "random"] {
        for p in ["10", "50", "100"] {
            for metric in ["accuracy", "label_accuracy"] {
                let n = rows.iter().filter(|r| r[0] == method && r[2] == p && r[3] == metric).count();
                assert_eq!(n, 1, "{method} {p} {metric}");
            }
        }
    }
    let full = rows.iter().find(|r| r[0] == "rlrp" && r[2] == "100" && r[3] == "accuracy").unwrap();
    assert_eq!(full[4].parse::<f64>().unwrap(), 1.0);
    assert!(rows.iter().all(|r| r[1] == "pixel-abs" && r[5] == "40"));

    // stdout when no --out is given
    let o = relprop(&["eval", &m, &model, "--dataset", path(&dataset), "--percentages", "10,50,100"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("method,mode"));
}

#[test]
fn localization_commands_report_their_metric() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path(), 30);
    let [m, model] = model_args("square_detector");
    for (cmd, metric) in [("pointing", "pointing_game"), ("distance", "avg_distance")] {
        let o = relprop(&[cmd, &m, &model, "--dataset", path(&dataset), "--percentages", "5,10"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let stdout = String::from_utf8(o.stdout).unwrap();
        let rows: Vec<&str> = stdout.lines().skip(1).collect();
        assert_eq!(rows.len(), 2, "{stdout}");
        assert!(rows.iter().all(|r| r.split(',').nth(3) == Some(metric)));
    }
}

#[test]
fn cross_with_itself_reproduces_eval() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = small_dataset(dir.path(), 30);
    let [m, model] = model_args("square_detector");
    let common = ["--dataset", path(&dataset), "--percentages", "5,20"];
    let eval = relprop(&[&["eval", &m, &model][..], &common].concat());
    let cross = relprop(&[&["cross", &m, &model, "--model-b", &model][..], &common].concat());
    assert!(eval.status.success() && cross.status.success(), "{}", stderr(&cross));
    let accuracy = |o: &Output| -> Vec<String> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| l.split(',').nth(3) == Some("accuracy"))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(accuracy(&eval), accuracy(&cross));
    assert_eq!(accuracy(&eval).len(), 2);
}

#[test]
fn verify_passes_on_shipped_fixtures() {
    let o = relprop(&["verify", "--fixtures", path(&fixtures()), "--nets", "20"]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
