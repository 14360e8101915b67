mod common;

use std::fs;

use resnext::trainer::Checkpoint;

use common::{run, stderr, stdout, without_wall_time, write_archive, write_archive_sized};

const SMALL: &[&str] = &[
    "--depth",
    "11",
    "--cardinality",
    "2",
    "--base-width",
    "2",
    "--subset",
    "cifar10",
    "--batch-size",
    "8",
    "--train-limit",
    "16",
    "--test-limit",
    "10",
    "--threads",
    "1",
];

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data-dir", data, "--out-dir", out];
    if !extra.contains(&"--epochs") {
        v.extend_from_slice(&["--epochs", "3"]);
    }
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn count_params_prints_the_total_first() {
    let o = run(&[
        "count-params",
        "--depth",
        "29",
        "--cardinality",
        "8",
        "--base-width",
        "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("34426698"));
    assert!(out.lines().count() > 5);
}

#[test]
fn bad_depth_is_rejected_with_a_message() {
    let o = run(&["count-params", "--depth", "28"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("28"), "{err}");
}

#[test]
fn verify_blocks_passes_and_fails_on_tolerance() {
    let args = [
        "verify-blocks",
        "--depth",
        "11",
        "--cardinality",
        "4",
        "--base-width",
        "2",
        "--spatial",
        "4",
    ];
    let o = run(&args);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("ok"));

    let mut strict = args.to_vec();
    strict.extend_from_slice(&["--tolerance", "0", "--tolerance-f64", "0"]);
    let o = run(&strict);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("EXCEEDED"));
}

#[test]
fn missing_data_directory_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("run");
    let o = run(&train_args(missing.to_str().unwrap(), out.to_str().unwrap(), &[]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data_batch_1.bin"), "{}", stderr(&o));
}

#[test]
fn prepare_writes_stable_manifests() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path());
    let data = dir.path().to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "prepare",
            "--data-dir",
            data,
            "--out-dir",
            out.to_str().unwrap(),
            "--subset",
            "cifar10",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let name = "cifar10_manifest.txt";
    assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    let text = fs::read_to_string(a.join(name)).unwrap();
    assert!(text.contains("train_per_class 500,500,500,500,500,500,500,500,500,500"));
    assert_eq!(text.lines().filter(|l| l.starts_with("test ")).count(), 1000);
}

#[test]
fn cifar5_needs_more_than_the_small_archive() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path());
    let data = dir.path().to_str().unwrap();
    let o = run(&["prepare", "--data-dir", data, "--out-dir", data, "--subset", "cifar5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("needs 1000"), "{}", stderr(&o));
}

#[test]
fn cifar2_needs_the_full_archive() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path());
    let data = dir.path().to_str().unwrap();
    let o = run(&["prepare", "--data-dir", data, "--out-dir", data, "--subset", "cifar2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("needs 2500"), "{}", stderr(&o));
}

#[test]
fn training_is_repeatable_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path());
    let data = dir.path().to_str().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    let (full_s, split_s) = (full.to_str().unwrap(), split.to_str().unwrap());

    let o = run(&train_args(data, full_s, &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "metrics.csv",
        "checkpoint.bin",
        "error_vs_epoch.svg",
        "run_manifest.txt",
    ] {
        assert!(full.join(f).exists(), "{f}");
    }

    let o = run(&train_args(data, split_s, &["--stop-after", "1"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let partial = fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert_eq!(partial.lines().count(), 2);
    let o = run(&train_args(data, split_s, &["--resume"]));
    assert!(o.status.success(), "{}", stderr(&o));

    let a = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert_eq!(a.lines().count(), 4);
    assert_eq!(without_wall_time(&a), without_wall_time(&b));
    // histories differ only in wall time; weights, buffers and velocities must match exactly
    let ca = Checkpoint::load(&full.join("checkpoint.bin")).unwrap();
    let cb = Checkpoint::load(&split.join("checkpoint.bin")).unwrap();
    assert_eq!(ca.next_epoch, cb.next_epoch);
    assert!(ca.tensors == cb.tensors, "checkpoint tensors differ");
}

#[test]
fn a_run_manifest_relaunches_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path());
    let data = dir.path().to_str().unwrap();
    let first = dir.path().join("first");
    let o = run(&train_args(data, first.to_str().unwrap(), &["--epochs", "1"]));
    assert!(o.status.success(), "{}", stderr(&o));

    let again = dir.path().join("again");
    let manifest = first.join("run_manifest.txt");
    let o = run(&[
        "train",
        "--data-dir",
        data,
        "--out-dir",
        again.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--test-limit",
        "10",
        "--threads",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read_to_string(first.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(again.join("metrics.csv")).unwrap();
    assert_eq!(without_wall_time(&a), without_wall_time(&b));

    let o = run(&[
        "eval",
        "--checkpoint",
        again.join("checkpoint.bin").to_str().unwrap(),
        "--data-dir",
        data,
        "--test-limit",
        "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let test_err = a
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!(
        stdout(&o).contains(&format!("test_err {test_err:.2}")),
        "{}",
        stdout(&o)
    );
}

#[test]
fn sweep_rejects_two_varying_axes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let o = run(&[
        "sweep",
        "--cardinality",
        "1,2",
        "--base-width",
        "4,8",
        "--data-dir",
        data,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cardinality and base-width"), "{}", stderr(&o));
}

#[test]
fn sweep_plots_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    write_archive_sized(dir.path(), 100, 100);
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep",
        "--depth",
        "11",
        "--cardinality",
        "1,2",
        "--base-width",
        "2",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--train-limit",
        "8",
        "--test-limit",
        "10",
        "--data-dir",
        data,
        "--out-dir",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("error_vs_epoch.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("series"))
        .count();
    assert_eq!(lines, 2);
    let size = fs::read_to_string(out.join("error_vs_size.svg")).unwrap();
    let doc = roxmltree::Document::parse(&size).unwrap();
    assert_eq!(
        doc.descendants()
            .filter(|n| n.attribute("class") == Some("point"))
            .count(),
        2
    );
    let listing = fs::read_to_string(out.join("sweep_manifest.txt")).unwrap();
    assert!(listing.starts_with("axis = cardinality"), "{listing}");
}
