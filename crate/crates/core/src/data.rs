//! MNIST (IDX) and CIFAR-10 (binary batch) ingestion, per-epoch shuffling and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::nn::DatasetKind;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Canonical split size of `dataset`.
    pub fn expected_len(self, dataset: DatasetKind) -> usize {
        match (dataset, self) {
            (DatasetKind::Mnist, Split::Train) => 60_000,
            (DatasetKind::Mnist, Split::Test) => 10_000,
            (DatasetKind::Cifar10, Split::Train) => 50_000,
            (DatasetKind::Cifar10, Split::Test) => 10_000,
        }
    }
}

/// Images in `[0, 1]` as `N×C×H×W` with labels `0..=9`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: DatasetKind,
    pub split: Split,
    images: Tensor<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: DatasetKind, split: Split, images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let want: [usize; 3] = match name {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        };
        let s = images.shape();
        if s.len() != 4 || s[1..] != want || s[0] != labels.len() {
            return Err(Error::shape("Dataset::new", s, &[labels.len(), want[0], want[1], want[2]]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::invalid("Dataset::new", format!("label {bad} out of range")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("Dataset::new", "pixel outside [0, 1]"));
        }
        Ok(Dataset {
            name,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The first `n` examples (all of them if `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len()).max(1);
        let len = self.image_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            name: self.name,
            split: self.split,
            images: Tensor::new(shape, self.images.data()[..n * len].to_vec()).expect("prefix keeps shape"),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data(path, "truncated header"))
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::data(path, format!("bad magic {magic:#010x}, expected {MNIST_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() != need {
        return Err(Error::data(path, format!("expected {need} bytes, found {}", bytes.len())));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::data(path, format!("bad magic {magic:#010x}, expected {MNIST_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::data(path, format!("expected {} bytes, found {}", 8 + count, bytes.len())));
    }
    Ok(bytes[8..].to_vec())
}

/// Re-encodes a dataset's images as an IDX3 file.
pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let [_, h, w] = ds.image_shape();
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [MNIST_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&MNIST_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&ds.labels);
    out
}

fn scale_pixels(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Builds one MNIST split from raw IDX bytes; `expected` pins the count.
pub fn mnist_split(
    images: &[u8],
    labels: &[u8],
    split: Split,
    expected: Option<usize>,
    path: &Path,
) -> Result<Dataset> {
    let img = parse_idx_images(images, path)?;
    let lab = parse_idx_labels(labels, path)?;
    if (img.rows, img.cols) != (28, 28) {
        return Err(Error::data(path, format!("images are {}×{}, expected 28×28", img.rows, img.cols)));
    }
    if img.count != lab.len() {
        return Err(Error::data(path, format!("{} images but {} labels", img.count, lab.len())));
    }
    if let Some(n) = expected.filter(|&n| n != img.count) {
        return Err(Error::data(path, format!("expected {n} examples, found {}", img.count)));
    }
    let tensor = Tensor::new(vec![img.count, 1, 28, 28], scale_pixels(&img.pixels))?;
    Dataset::new(DatasetKind::Mnist, split, tensor, lab).map_err(|e| Error::data(path, e.to_string()))
}

/// Reads the four IDX files of MNIST from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let f: Vec<PathBuf> = MNIST_FILES.iter().map(|n| dir.join(n)).collect();
    let train = mnist_split(
        &read(&f[0])?,
        &read(&f[1])?,
        Split::Train,
        Some(Split::Train.expected_len(DatasetKind::Mnist)),
        &f[0],
    )?;
    let test = mnist_split(
        &read(&f[2])?,
        &read(&f[3])?,
        Split::Test,
        Some(Split::Test.expected_len(DatasetKind::Mnist)),
        &f[2],
    )?;
    Ok((train, test))
}

/// Splits CIFAR-10 binary records into labels and channel-major pixels.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::data(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::data(path, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn cifar_split(files: &[PathBuf], split: Split, expected: Option<usize>) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let (l, p) = parse_cifar_records(&read(f)?, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    if let Some(n) = expected.filter(|&n| n != labels.len()) {
        return Err(Error::data(&files[0], format!("expected {n} examples, found {}", labels.len())));
    }
    let tensor = Tensor::new(vec![labels.len(), 3, 32, 32], scale_pixels(&pixels))?;
    Dataset::new(DatasetKind::Cifar10, split, tensor, labels)
}

/// Reads the CIFAR-10 binary batches from `dir` or its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let mut dir = dir.as_ref().to_path_buf();
    if !dir.join(CIFAR_TEST_FILE).exists() && dir.join("cifar-10-batches-bin").is_dir() {
        dir = dir.join("cifar-10-batches-bin");
    }
    let train_files: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|n| dir.join(n)).collect();
    let train = cifar_split(&train_files, Split::Train, Some(Split::Train.expected_len(DatasetKind::Cifar10)))?;
    let test = cifar_split(
        &[dir.join(CIFAR_TEST_FILE)],
        Split::Test,
        Some(Split::Test.expected_len(DatasetKind::Cifar10)),
    )?;
    Ok((train, test))
}

/// `$BETAPRUNE_DATA_DIR`, falling back to `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("BETAPRUNE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads `dataset` from `<data_dir>/<dataset name>`.
pub fn load(dataset: DatasetKind, data_dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = data_dir.as_ref().join(dataset.as_str());
    match dataset {
        DatasetKind::Mnist => load_mnist(dir),
        DatasetKind::Cifar10 => load_cifar10(dir),
    }
}

/// Fisher–Yates permutation of `0..n` seeded from `(run_seed, epoch)`.
pub fn shuffle_epoch(n: usize, run_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = rng::stream(rng::mix(run_seed, epoch), Stream::Shuffle);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch_seed: u64,
    pub permutation: Vec<usize>,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn for_epoch(n: usize, run_seed: u64, epoch: u64, batch_size: usize) -> Self {
        BatchPlan {
            epoch_seed: rng::mix(run_seed, epoch),
            permutation: shuffle_epoch(n, run_seed, epoch),
            batch_size,
        }
    }

    /// Identity order, used for evaluation passes.
    pub fn sequential(n: usize, batch_size: usize) -> Self {
        BatchPlan {
            epoch_seed: 0,
            permutation: (0..n).collect(),
            batch_size,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Batches in plan order; the last one may be short.
pub fn batches<'a>(ds: &'a Dataset, plan: &'a BatchPlan) -> impl Iterator<Item = Batch> + 'a {
    let len = ds.image_len();
    let [c, h, w] = ds.image_shape();
    plan.permutation.chunks(plan.batch_size.max(1)).map(move |idx| {
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(ds.image(i));
        }
        Batch {
            x: Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape"),
            labels: idx.iter().map(|&i| ds.labels[i] as usize).collect(),
            indices: idx.to_vec(),
        }
    })
}
