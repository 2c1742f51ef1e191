//! MNIST (IDX) and CIFAR-10 (binary batch) ingestion.
//!
//! Pixels are scaled to [0, 1] and standardized per channel:
//! MNIST with mean 0.1307 / std 0.3081, CIFAR-10 with the usual per-channel
//! training-set statistics. The training file is split 90/10 into train and
//! validation by a seeded shuffle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Environment variable naming the dataset root when no path is configured.
pub const DATA_DIR_ENV: &str = "NVCIM_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, start: usize, end: usize) -> (Tensor, &[usize]) {
        (self.images.slice_outer(start, end), &self.labels[start..end])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded permutation split; the first `val_fraction` of the shuffled order
/// becomes validation.
pub fn split_train_val(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!(
            "validation fraction {val_fraction} not in [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::DataSplit, 0, 0));
    let n_val = (data.len() as f64 * val_fraction).round() as usize;
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    // keep file order inside each part so batches stay cache friendly
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn ingest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX file with unsigned-byte payload; returns dims and payload.
pub fn parse_idx(path: &Path, bytes: &[u8], expected_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(ingest_err(path, "file shorter than the IDX magic number"));
    }
    let magic = be_u32(bytes, 0);
    let expected_magic = 0x0800 | expected_dims as u32;
    if magic != expected_magic {
        return Err(ingest_err(
            path,
            format!("bad magic number {magic:#010x}, expected {expected_magic:#010x}"),
        ));
    }
    let header = 4 + 4 * expected_dims;
    if bytes.len() < header {
        return Err(ingest_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..expected_dims)
        .map(|d| be_u32(bytes, 4 + 4 * d) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(ingest_err(
            path,
            format!(
                "payload holds {} bytes, header {:?} needs {n}",
                bytes.len() - header,
                dims
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn mnist_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let (idims, pixels) = parse_idx(&ip, &read(&ip)?, 3)?;
    let (ldims, raw_labels) = parse_idx(&lp, &read(&lp)?, 1)?;
    if idims[0] != ldims[0] {
        return Err(ingest_err(
            &lp,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if let Some(&bad) = raw_labels.iter().find(|&&l| l > 9) {
        return Err(ingest_err(&lp, format!("label {bad} out of range")));
    }
    let data = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    Dataset::new(images, raw_labels.iter().map(|&l| l as usize).collect(), 10)
}

/// Reads the four standard MNIST IDX files from `dir` (uncompressed).
pub fn ingest_mnist(dir: &Path, seed: u64) -> Result<Splits> {
    let full = mnist_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = mnist_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let (train, val) = split_train_val(&full, 0.1, seed)?;
    Ok(Splits { train, val, test })
}

const CIFAR_RECORD: usize = 1 + 3072;

fn cifar_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(ingest_err(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(ingest_err(path, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        for (c, plane) in rec[1..].chunks(1024).enumerate() {
            pixels.extend(
                plane
                    .iter()
                    .map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]),
            );
        }
    }
    Ok((pixels, labels))
}

fn cifar_set(paths: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        if limit.is_some_and(|l| labels.len() >= l) {
            break;
        }
        let (px, lb) = cifar_batch(p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if let Some(l) = limit.filter(|&l| l < labels.len()) {
        labels.truncate(l);
        pixels.truncate(l * 3072);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10)
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
/// `train_limit` / `test_limit` keep only the leading samples.
pub fn ingest_cifar10(
    dir: &Path,
    seed: u64,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<Splits> {
    let train_paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let full = cifar_set(&train_paths, train_limit)?;
    let test = cifar_set(&[dir.join("test_batch.bin")], test_limit)?;
    let (train, val) = split_train_val(&full, 0.1, seed)?;
    Ok(Splits { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

/// Resolves the dataset directory: explicit path, else `$NVCIM_DATA_DIR/<name>`.
pub fn resolve_data_dir(explicit: Option<&Path>, kind: DatasetKind) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let root = std::env::var_os(DATA_DIR_ENV)
        .ok_or_else(|| Error::config(format!("no dataset path configured and {DATA_DIR_ENV} is unset")))?;
    let sub = match kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::Cifar10 => "cifar10",
    };
    Ok(PathBuf::from(root).join(sub))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend(payload);
        b
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let p = Path::new("x.idx");
        let ok = idx(0x0803, &[2, 1, 2], &[0, 1, 2, 3]);
        let (dims, data) = parse_idx(p, &ok, 3).unwrap();
        assert_eq!(dims, vec![2, 1, 2]);
        assert_eq!(data, vec![0, 1, 2, 3]);

        let bad_magic = idx(0x0903, &[2, 1, 2], &[0, 1, 2, 3]);
        let err = parse_idx(p, &bad_magic, 3).unwrap_err();
        assert!(err.to_string().contains("x.idx"), "{err}");

        let truncated = idx(0x0803, &[2, 1, 2], &[0, 1, 2]);
        assert!(matches!(parse_idx(p, &truncated, 3), Err(Error::Ingest { .. })));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let images = Tensor::from_fn(&[20, 1, 1, 1], |i| i as f32);
        let data = Dataset::new(images, (0..20).map(|i| i % 10).collect(), 10).unwrap();
        let (a_train, a_val) = split_train_val(&data, 0.1, 3).unwrap();
        let (b_train, b_val) = split_train_val(&data, 0.1, 3).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        assert_eq!((a_train.len(), a_val.len()), (18, 2));
        let mut all: Vec<f32> = a_train.images.data().to_vec();
        all.extend(a_val.images.data());
        all.sort_by(f32::total_cmp);
        assert_eq!(all, (0..20).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let images = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(Dataset::new(images, vec![10], 10), Err(Error::Input(_))));
    }
}
