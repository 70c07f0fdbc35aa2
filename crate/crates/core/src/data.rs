//! IDX (MNIST) and CIFAR-10 binary loaders, standardization, and
//! flip/crop augmentation.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Environment variable consulted when no data directory flag is given.
pub const DATA_DIR_ENV: &str = "DUALPREC_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dataset(format!(
                "images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Copies the listed samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.images.row_len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// The first `n` samples (all of them when `n` is zero or too large).
    pub fn take(self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self;
        }
        let (images, labels) = self.gather(&(0..n).collect::<Vec<_>>());
        Self {
            images,
            labels: labels.into_iter().map(|l| l as u8).collect(),
            ..self
        }
    }
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)?;
    } else {
        BufReader::new(file).read_to_end(&mut buf)?;
    }
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Parses an IDX image file and its label file into a `[0, 1]`-scaled
/// dataset of shape `(N, 1, rows, cols)`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = open(images)?;
    let lab = open(labels)?;
    parse_idx(&img, &lab, split)
}

pub fn parse_idx(img: &[u8], lab: &[u8], split: Split) -> Result<Dataset> {
    let magic = be_u32(img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!("bad IDX image magic {magic:#010x}")));
    }
    let magic = be_u32(lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!("bad IDX label magic {magic:#010x}")));
    }
    let (n, rows, cols) = (
        be_u32(img, 4)? as usize,
        be_u32(img, 8)? as usize,
        be_u32(img, 12)? as usize,
    );
    let n_labels = be_u32(lab, 4)? as usize;
    if n != n_labels {
        return Err(Error::Dataset(format!("{n} images but {n_labels} labels")));
    }
    let pixels = &img[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::Dataset(format!(
            "image payload is {} bytes, header implies {}",
            pixels.len(),
            n * rows * cols
        )));
    }
    let labels = &lab[8..];
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "label payload is {} bytes, header implies {n}",
            labels.len()
        )));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.to_vec(),
        10,
        split,
    )
}

/// Parses concatenated CIFAR-10 binary records into `(N, 3, 32, 32)`.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Dataset(format!(
            "CIFAR-10 payload of {} bytes is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, split)
}

pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = open(p)?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Dataset(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
                p.display(),
                chunk.len()
            )));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes, split)
}

/// Per-channel standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let c = ds.channels();
        let plane: usize = ds.images.shape()[2..].iter().product();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in ds.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        let count = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let c = ds.channels();
        let plane: usize = ds.images.shape()[2..].iter().product();
        for (i, v) in ds.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
        }
    }
}

/// A train/test pair standardized with the training statistics.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

impl DataSplits {
    /// Truncates the splits (zero keeps everything), then standardizes.
    pub fn prepare(train: Dataset, test: Dataset, train_limit: usize, test_limit: usize) -> Self {
        let mut train = train.take(train_limit);
        let mut test = test.take(test_limit);
        let standardizer = Standardizer::fit(&train);
        standardizer.apply(&mut train);
        standardizer.apply(&mut test);
        Self {
            train,
            test,
            standardizer,
        }
    }
}

fn find(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    for base in [dir.to_path_buf(), dir.join("mnist"), dir.join("cifar-10-batches-bin")] {
        for name in names {
            for candidate in [base.join(name), base.join(format!("{name}.gz"))] {
                if candidate.is_file() {
                    return Some(candidate);
                }
            }
        }
    }
    None
}

fn require(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    find(dir, names).ok_or_else(|| {
        Error::Dataset(format!("{} not found under {}", names[0], dir.display()))
    })
}

/// Raw (unstandardized) MNIST train and test splits from `dir`, or from
/// `dir/mnist`. Accepts both `train-images-idx3-ubyte` and
/// `train-images.idx3-ubyte` spellings, optionally gzipped.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &require(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        &require(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
        Split::Train,
    )?;
    let test = load_idx(
        &require(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
        &require(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Raw CIFAR-10 splits from `dir` or `dir/cifar-10-batches-bin`.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| require(dir, &[&format!("data_batch_{i}.bin")]))
        .collect::<Result<_>>()?;
    let test = require(dir, &["test_batch.bin"])?;
    Ok((
        load_cifar10(&train, Split::Train)?,
        load_cifar10(&[test], Split::Test)?,
    ))
}

/// `flag`, else `$DUALPREC_DATA`.
pub fn resolve_data_dir(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// A fresh permutation of `0..len`.
pub fn epoch_order<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    /// Horizontal flip with probability 1/2, then a random crop from the
    /// image zero-padded by four pixels.
    FlipCrop,
}

impl Augment {
    pub fn as_str(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::FlipCrop => "flip_crop",
        }
    }
}

impl std::str::FromStr for Augment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Augment::None),
            "flip_crop" => Ok(Augment::FlipCrop),
            _ => Err(format!("unknown augmentation `{s}` (expected none or flip_crop)")),
        }
    }
}

pub const CROP_PAD: usize = 4;

/// Mirrors a `(C, H, W)` image left to right in place.
pub fn flip_horizontal(img: &mut [f32], h: usize, w: usize) {
    debug_assert_eq!(img.len() % (h * w), 0);
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Window of size `(H, W)` at offset `(dy, dx)` into the image padded by
/// `pad` zeros on every side. `(pad, pad)` is the identity.
pub fn pad_crop(img: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor<f32>, policy: Augment, rng: &mut R) {
    if policy == Augment::None {
        return;
    }
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let len = c * h * w;
    for img in batch.data_mut().chunks_mut(len) {
        if rng.random_bool(0.5) {
            flip_horizontal(img, h, w);
        }
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        let cropped = pad_crop(img, c, h, w, CROP_PAD, dy, dx);
        img.copy_from_slice(&cropped);
    }
}
