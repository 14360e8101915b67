//! CIFAR-10 binary parsing, the Cifar-2/-5/-10 subsets, normalization,
//! augmentation and mini-batching.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Shape, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const CROP_PAD: usize = 2;

pub const CLASS_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Channel-planar RGB, each plane 32x32 row-major.
    pub pixels: Vec<u8>,
    /// Index of the source file within its split.
    pub file: u16,
    /// Byte offset of the record within its source file.
    pub offset: u64,
}

/// Decodes a stream of 3,073-byte records (label byte + planar pixels).
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Cifar(format!(
            "stream of {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] > 9 {
                return Err(Error::Cifar(format!("record {i} has label byte {}", rec[0])));
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
                file: 0,
                offset: (i * RECORD_BYTES) as u64,
            })
        })
        .collect()
}

/// The raw train and test splits of a CIFAR-10 binary distribution.
#[derive(Clone, Debug, Default)]
pub struct CifarArchive {
    pub train: Vec<CifarRecord>,
    pub test: Vec<CifarRecord>,
}

impl CifarArchive {
    /// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str, file: u16| -> Result<Vec<CifarRecord>> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::Cifar(format!("cannot read {}: {e}", path.display())))?;
            let mut recs = parse_cifar_bin(&bytes).map_err(|e| Error::Cifar(format!("{}: {e}", path.display())))?;
            for r in &mut recs {
                r.file = file;
            }
            Ok(recs)
        };
        let mut train = Vec::new();
        for (i, name) in TRAIN_FILES.iter().enumerate() {
            train.extend(read(name, i as u16)?);
        }
        Ok(CifarArchive {
            train,
            test: read(TEST_FILE, 0)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubsetName {
    Cifar2,
    Cifar5,
    Cifar10,
}

impl SubsetName {
    pub const ALL: [SubsetName; 3] = [SubsetName::Cifar2, SubsetName::Cifar5, SubsetName::Cifar10];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetName::Cifar2 => "cifar2",
            SubsetName::Cifar5 => "cifar5",
            SubsetName::Cifar10 => "cifar10",
        }
    }

    pub fn spec(self) -> SubsetSpec {
        SubsetSpec::of(self)
    }
}

impl fmt::Display for SubsetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "");
        SubsetName::ALL
            .into_iter()
            .find(|n| n.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSpec {
    pub name: SubsetName,
    /// Original CIFAR-10 labels; position is the dense label.
    pub classes: Vec<u8>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl SubsetSpec {
    pub fn of(name: SubsetName) -> Self {
        let (classes, train, test): (Vec<u8>, usize, usize) = match name {
            // cat, dog
            SubsetName::Cifar2 => (vec![3, 5], 2500, 500),
            // cat, dog, deer, horse, frog
            SubsetName::Cifar5 => (vec![3, 5, 4, 7, 6], 1000, 200),
            SubsetName::Cifar10 => ((0..10).collect(), 500, 100),
        };
        SubsetSpec {
            name,
            classes,
            train_per_class: train,
            test_per_class: test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        self.classes.iter().map(|&c| CLASS_NAMES[c as usize]).collect()
    }

    pub fn dense_label(&self, original: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == original)
    }
}

/// Per-channel mean and standard deviation on the 0-1 pixel scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Population statistics over every pixel of the given images.
    pub fn from_images(images: &[Vec<u8>]) -> Result<Self> {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let count = (images.len() * plane) as f64;
        if images.is_empty() {
            return Err(Error::InvalidArgument(
                "normalization statistics of an empty set".into(),
            ));
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let sum: u64 = images
                .iter()
                .map(|im| im[c * plane..(c + 1) * plane].iter().map(|&p| p as u64).sum::<u64>())
                .sum();
            let m = sum as f64 / 255.0 / count;
            let sq: f64 = images
                .iter()
                .flat_map(|im| im[c * plane..(c + 1) * plane].iter())
                .map(|&p| (p as f64 / 255.0 - m).powi(2))
                .sum();
            mean[c] = m;
            std[c] = (sq / count).sqrt();
        }
        let stats = NormStats { mean, std };
        stats.check()?;
        Ok(stats)
    }

    pub fn check(&self) -> Result<()> {
        if self.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "normalization std must be positive, got {:?}",
                self.std
            )));
        }
        Ok(())
    }
}

/// One split of a subset: raw images, dense labels and their provenance.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    /// `(file index, byte offset)` of each example in the source split.
    pub sources: Vec<(u16, u64)>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            sources: self.sources[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SubsetSpec,
    pub train: Split,
    pub test: Split,
    /// Computed from `train`; also applied to `test`.
    pub stats: NormStats,
}

fn select(records: &[CifarRecord], spec: &SubsetSpec, per_class: usize, split: &str) -> Result<Split> {
    let mut taken = vec![0usize; spec.num_classes()];
    let mut out = Split::default();
    for r in records {
        let Some(dense) = spec.dense_label(r.label) else {
            continue;
        };
        if taken[dense] == per_class {
            continue;
        }
        taken[dense] += 1;
        out.images.push(r.pixels.clone());
        out.labels.push(dense);
        out.sources.push((r.file, r.offset));
    }
    if let Some((dense, &have)) = taken.iter().enumerate().find(|(_, &t)| t < per_class) {
        return Err(Error::InsufficientData(format!(
            "{split} split has {have} images of class {}, {} needs {per_class}",
            CLASS_NAMES[spec.classes[dense] as usize], spec.name
        )));
    }
    Ok(out)
}

/// Takes, per class, the first `k` records in file order and remaps labels
/// to dense indices in class-list order.
pub fn build_subset(train: &[CifarRecord], test: &[CifarRecord], spec: &SubsetSpec) -> Result<Dataset> {
    let train = select(train, spec, spec.train_per_class, "train")?;
    let test = select(test, spec, spec.test_per_class, "test")?;
    let stats = NormStats::from_images(&train.images)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
        stats,
    })
}

/// Reads the archive in `dir` and draws the named subset from it.
pub fn load_subset(dir: &Path, name: SubsetName) -> Result<Dataset> {
    let archive = CifarArchive::load(dir)?;
    build_subset(&archive.train, &archive.test, &name.spec())
}

impl Dataset {
    /// Keeps only the first examples of each split. Normalization
    /// statistics stay those of the full training subset.
    pub fn limited(mut self, train: Option<usize>, test: Option<usize>) -> Dataset {
        if let Some(n) = train {
            self.train = self.train.take(n);
        }
        if let Some(n) = test {
            self.test = self.test.take(n);
        }
        self
    }

    /// Plain-text audit record of how the subset was drawn.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let spec = &self.spec;
        let _ = writeln!(out, "subset {}", spec.name);
        let _ = writeln!(out, "classes {}", spec.class_names().join(","));
        let _ = writeln!(
            out,
            "original_labels {}",
            spec.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "selection first-k-per-class-in-file-order");
        let counts = |s: &Split| {
            s.class_counts(spec.num_classes())
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(out, "train_per_class {}", counts(&self.train));
        let _ = writeln!(out, "test_per_class {}", counts(&self.test));
        let _ = writeln!(out, "train_total {}", self.train.len());
        let _ = writeln!(out, "test_total {}", self.test.len());
        let _ = writeln!(out, "norm_mean {:?}", self.stats.mean);
        let _ = writeln!(out, "norm_std {:?}", self.stats.std);
        for (split, files, s) in [
            ("train", &TRAIN_FILES[..], &self.train),
            ("test", &[TEST_FILE][..], &self.test),
        ] {
            for (&label, &(file, offset)) in s.labels.iter().zip(&s.sources) {
                let _ = writeln!(out, "{split} {label} {} {offset}", files[file as usize]);
            }
        }
        out
    }
}

/// Raw pixels as a `[1, 3, 32, 32]` tensor on the 0-255 scale.
pub fn image_tensor<T: Element>(pixels: &[u8]) -> Tensor<T> {
    let data = pixels.iter().map(|&p| T::from_f64_lossy(p as f64)).collect();
    Tensor::from_vec(Shape::new(1, 3, IMAGE_SIDE, IMAGE_SIDE), data).expect("image size")
}

/// Crop of the zero-padded image at `(dy, dx)` in `0..=4`, optionally
/// mirrored left to right.
pub fn crop_flip<T: Element>(image: &Tensor<T>, dy: usize, dx: usize, flip: bool) -> Tensor<T> {
    let padded = image.pad2d(CROP_PAD);
    let s = image.shape();
    Tensor::from_fn(s, |[n, c, i, j]| {
        let jj = if flip { s.w - 1 - j } else { j };
        padded[[n, c, i + dy, jj + dx]]
    })
}

/// Random 32x32 crop from the image padded by 2, then a horizontal flip
/// with probability one half.
pub fn augment<T: Element, R: Rng + ?Sized>(image: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(image, dy, dx, flip)
}

/// `(x / 255 - mean) / std` per channel.
pub fn normalize<T: Element>(image: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>> {
    stats.check()?;
    let s = image.shape();
    let plane = s.plane();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s.c;
        let x = v.as_f64() / 255.0;
        *v = T::from_f64_lossy((x - stats.mean[c]) / stats.std[c]);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Example indices into the split.
    pub indices: Vec<usize>,
}

/// Example order for one epoch: a seeded shuffle when training, the
/// identity order otherwise.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut rng::derive(seed, Purpose::Shuffle, epoch as u64, 0));
    }
    order
}

/// Mini-batch iterator. Training batches are shuffled per epoch and
/// augmented with randomness keyed by `(seed, epoch, example index)`;
/// evaluation batches are sequential and only normalized. The last partial
/// batch is kept.
pub struct Batches<'a> {
    split: &'a Split,
    stats: NormStats,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<(u64, usize)>,
}

impl<'a> Batches<'a> {
    pub fn new(
        split: &'a Split,
        stats: NormStats,
        batch_size: usize,
        seed: u64,
        epoch: usize,
        train: bool,
        augment: bool,
    ) -> Self {
        Batches {
            split,
            stats,
            order: epoch_order(split.len(), seed, epoch, train),
            batch_size: batch_size.max(1),
            cursor: 0,
            augment: (train && augment).then_some((seed, epoch)),
        }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn prepare(&self, index: usize) -> Tensor<f32> {
        let image = image_tensor::<f32>(&self.split.images[index]);
        let image = match self.augment {
            Some((seed, epoch)) => {
                let mut rng = rng::derive(seed, Purpose::Augment, epoch as u64, index as u64);
                augment(&image, &mut rng)
            }
            None => image,
        };
        normalize(&image, &self.stats).expect("checked statistics")
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in &indices {
            data.extend_from_slice(self.prepare(i).data());
        }
        let images = Tensor::from_vec(Shape::new(indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE), data).expect("batch size");
        Some(Batch {
            images,
            labels: indices.iter().map(|&i| self.split.labels[i]).collect(),
            indices,
        })
    }
}

/// Test helper: a well-formed CIFAR-format stream with `per_class` records of
/// every label, interleaved, with pixel bytes derived from `salt`.
pub fn synthetic_cifar_bytes(per_class: usize, salt: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(per_class * 10 * RECORD_BYTES);
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    for i in 0..per_class * 10 {
        out.push((i % 10) as u8);
        for _ in 0..IMAGE_BYTES {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            out.push((state >> 56) as u8);
        }
    }
    out
}
