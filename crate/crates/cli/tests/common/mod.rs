#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resnext::data::{synthetic_cifar_bytes, TEST_FILE, TRAIN_FILES};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resnext"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn resnext")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// CIFAR-layout archive with 500 train and 100 test images per class,
/// enough for every subset except the 2,500-per-class Cifar-2 draw.
pub fn write_archive(dir: &Path) {
    write_archive_sized(dir, 100, 100);
}

pub fn write_archive_sized(dir: &Path, train_per_file: usize, test_per_class: usize) {
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        fs::write(dir.join(name), synthetic_cifar_bytes(train_per_file, i as u64 + 1)).unwrap();
    }
    fs::write(dir.join(TEST_FILE), synthetic_cifar_bytes(test_per_class, 77)).unwrap();
}

/// Metrics CSV with the timing column dropped.
pub fn without_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}
