//! End-to-end CLI integration: exit codes, integrity refusals, flag
//! overrides, and artifact shapes, all on the offline synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_reconaudit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Train a small frozen synthetic classifier into `dir`.
fn train_fixture(dir: &Path, seed: u64) {
    let out = run(&[
        "train-classifier",
        "--arch",
        "mlp",
        "--dataset",
        "synthetic",
        "--epochs",
        "12",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "fixture training failed: {}", stderr(&out));
}

fn invert_fixture(clf: &Path, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "invert",
        "--classifier",
        clf.to_str().unwrap(),
        "--steps",
        "30",
        "--batch",
        "8",
        "--gen-width",
        "0.3",
        "--log-every",
        "5",
        "--seed",
        "9",
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn unknown_arch_exits_2_and_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-classifier",
        "--arch",
        "resnet",
        "--dataset",
        "synthetic",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("--arch"), "message names the flag: {msg}");
    assert!(msg.contains("resnet"), "message names the value: {msg}");
}

#[test]
fn unknown_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-classifier",
        "--dataset",
        "imagenet",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--dataset"));
}

#[test]
fn same_seed_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_fixture(&a, 7);
    train_fixture(&b, 7);
    let wa = std::fs::read(a.join("weights.bin")).unwrap();
    let wb = std::fs::read(b.join("weights.bin")).unwrap();
    assert_eq!(wa, wb, "same seed must give byte-identical weight blobs");

    let c = tmp.path().join("c");
    train_fixture(&c, 8);
    let wc = std::fs::read(c.join("weights.bin")).unwrap();
    assert_ne!(wa, wc, "different seed must differ");
}

#[test]
fn zero_epochs_yields_frozen_near_chance_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("clf");
    let out = run(&[
        "train-classifier",
        "--arch",
        "mlp",
        "--dataset",
        "synthetic",
        "--epochs",
        "0",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("classifier.json")).unwrap()).unwrap();
    let acc = sidecar["record"]["final_train_accuracy"].as_f64().unwrap();
    assert!(acc > 0.05 && acc < 0.6, "near chance, got {acc}");
}

#[test]
fn invert_refuses_tampered_classifier() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("clf");
    train_fixture(&clf, 1);

    // flip one byte deep inside the weight blob
    let wpath = clf.join("weights.bin");
    let mut bytes = std::fs::read(&wpath).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&wpath, bytes).unwrap();

    let out = invert_fixture(&clf, &tmp.path().join("inv"), &[]);
    assert_eq!(code(&out), 4, "digest mismatch must refuse to run");
    assert!(stderr(&out).contains("digest"), "{}", stderr(&out));
}

#[test]
fn eta3_zero_unweights_grad_column() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("clf");
    train_fixture(&clf, 2);
    let inv = tmp.path().join("inv");
    let out = invert_fixture(&clf, &inv, &["--weights.eta3", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let history = std::fs::read_to_string(inv.join("history.csv")).unwrap();
    let mut rows = 0;
    for line in history.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (kl, kl_p, ce, ce_p, cos, ortho, var, pix, grad, total) =
            (f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], f[9], f[10]);
        // default weights with eta3 forced to zero
        let recomposed = kl + kl_p + ce + ce_p + 0.1 * cos + 0.1 * ortho + 1e-4 * var + pix;
        assert!(
            (total - recomposed).abs() <= 1e-6,
            "grad column must carry zero weight: total {total} vs {recomposed}"
        );
        assert!(grad > 0.0, "grad column is still logged");
        rows += 1;
    }
    assert!(rows >= 6, "history has logged rows");
}

#[test]
fn evaluate_emits_reports_and_grid_geometry_follows_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("clf");
    train_fixture(&clf, 3);
    let inv = tmp.path().join("inv");
    assert_eq!(code(&invert_fixture(&clf, &inv, &[])), 0);

    let eval = tmp.path().join("eval");
    let out = run(&[
        "evaluate",
        "--classifier",
        clf.to_str().unwrap(),
        "--generator",
        inv.to_str().unwrap(),
        "--per-class",
        "3",
        "--grid-per-class",
        "2",
        "--seed",
        "4",
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_class"].as_array().unwrap().len(), 4);
    assert_eq!(report["total_matches"].as_u64().unwrap(), 12);
    assert!(report["invalid_classes"].as_array().unwrap().is_empty());

    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("dataset,architecture,class,mean_ssim,n,config_digest"));
    assert_eq!(csv.lines().count(), 1 + 4 + 1, "4 class rows + summary row");

    // 2 rows per class x 4 classes = 8 rows, 2 columns of 28x28 + 2px margins
    let decoder = png::Decoder::new(std::io::BufReader::new(
        std::fs::File::open(eval.join("grid.png")).unwrap(),
    ));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    assert_eq!(info.width, 28 * 2 + 2);
    assert_eq!(info.height, 8 * 30 - 2);
}

#[test]
fn global_scope_never_reports_below_same_class() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("clf");
    train_fixture(&clf, 5);
    let inv = tmp.path().join("inv");
    assert_eq!(code(&invert_fixture(&clf, &inv, &[])), 0);

    let mut means = Vec::new();
    for scope in ["same-class", "global"] {
        let eval = tmp.path().join(format!("eval_{scope}"));
        let out = run(&[
            "evaluate",
            "--classifier",
            clf.to_str().unwrap(),
            "--generator",
            inv.to_str().unwrap(),
            "--per-class",
            "4",
            "--match-scope",
            scope,
            "--seed",
            "6",
            "--out",
            eval.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
        means.push(report["overall_mean"].as_f64().unwrap());
    }
    assert!(
        means[1] >= means[0] - 1e-12,
        "global argmax over a superset: {} vs {}",
        means[1],
        means[0]
    );
}

#[test]
fn config_file_loses_to_flags_and_manifest_records_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "train.epochs = 3\ntrain.seed = 40\n").unwrap();
    let dir = tmp.path().join("clf");
    let out = run(&[
        "train-classifier",
        "--dataset",
        "synthetic",
        "--epochs",
        "2",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    // flag beat the file for epochs; the file's seed survived
    assert_eq!(manifest["resolved_config"]["train.epochs"], "2");
    assert_eq!(manifest["resolved_config"]["train.seed"], "40");
    assert_eq!(manifest["seeds"]["train"], 40);
}

#[test]
fn verify_round_trip_and_drift_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("runs").join("clf");
    train_fixture(&clf, 6);

    let ok = run(&["verify", "--dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    // tamper with a recorded artifact
    let sidecar = clf.join("classifier.json");
    let mut text = std::fs::read_to_string(&sidecar).unwrap();
    text.push(' ');
    std::fs::write(&sidecar, text).unwrap();
    let bad = run(&["verify", "--dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&bad), 4);
    assert!(stderr(&bad).contains("drift"), "{}", stderr(&bad));
}

#[test]
fn missing_checkpoint_is_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invert_fixture(&tmp.path().join("nope"), &tmp.path().join("inv"), &[]);
    assert_eq!(code(&out), 4);
}

#[test]
fn resume_reaches_identical_weights_as_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let clf = tmp.path().join("clf");
    train_fixture(&clf, 9);

    // interrupted: 15 steps, then resume to 30
    let inv_a = tmp.path().join("resumed");
    let mut args = vec![
        "invert",
        "--classifier",
        clf.to_str().unwrap(),
        "--steps",
        "15",
        "--batch",
        "8",
        "--gen-width",
        "0.3",
        "--seed",
        "10",
        "--ckpt-every",
        "5",
        "--out",
        inv_a.to_str().unwrap(),
    ];
    assert_eq!(code(&run(&args)), 0);
    args[4] = "30";
    args.push("--resume");
    let resumed = run(&args);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("resuming from step 15"));

    let inv_b = tmp.path().join("straight");
    let out = run(&[
        "invert",
        "--classifier",
        clf.to_str().unwrap(),
        "--steps",
        "30",
        "--batch",
        "8",
        "--gen-width",
        "0.3",
        "--seed",
        "10",
        "--out",
        inv_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);

    let wa = std::fs::read(inv_a.join("generator.bin")).unwrap();
    let wb = std::fs::read(inv_b.join("generator.bin")).unwrap();
    assert_eq!(wa, wb, "resumed run must land on the uninterrupted weights");

    // resumed history covers both segments
    let history = std::fs::read_to_string(inv_a.join("history.csv")).unwrap();
    let steps: Vec<usize> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.contains(&0) && steps.contains(&29), "history spans the whole run: {steps:?}");
}

#[test]
fn benchmark_single_cell_emits_table_and_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir: PathBuf = tmp.path().join("bench");
    let out = run(&[
        "benchmark",
        "--cells",
        "synthetic:mlp",
        "--epochs",
        "8",
        "--steps",
        "20",
        "--gen-width",
        "0.3",
        "--per-class",
        "3",
        "--master-seed",
        "11",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "dataset,mlp,vit,cnn");
    let row = lines.next().unwrap();
    assert!(row.starts_with("synthetic,0."), "mlp cell filled: {row}");
    assert!(row.ends_with(",,"), "vit and cnn cells empty: {row}");
    assert!(out_dir.join("cells.json").exists());
}
