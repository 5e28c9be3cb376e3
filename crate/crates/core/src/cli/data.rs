use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DatasetConfig, DatasetId};
use crate::error::{Error, Result};
use crate::nnkernel::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len() as u64, format!("header truncated, need {} bytes", at + 4)))
}

/// IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {n}×{rows}×{cols} images, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// MNIST in IDX form from `dir`; `train` picks `train-*` over `t10k-*`.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(&lbl_path, 8 + i as u64, format!("label {} out of range", labels[i])));
    }
    let images = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(images, labels, vec![1, rows, cols], 10)
}

/// CIFAR-10 binary batches from `dir`: `data_batch_1..5.bin` or `test_batch.bin`.
pub fn load_cifar10(dir: &Path, train: bool) -> Result<Dataset> {
    let files: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let (x, y) = read_cifar_batch(&path)?;
        images.extend(x);
        labels.extend(y);
    }
    Dataset::new(images, labels, vec![3, 32, 32], 10)
}

pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f64>, Vec<u8>)> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(
            path,
            whole as u64,
            format!(
                "file has {} bytes, expected a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(path, (i * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((images, labels))
}

/// Ten class templates on `dims` plus Gaussian pixel noise.
pub fn synthetic(n: usize, dims: &[usize], classes: usize, noise: f64, seed: u64, split: u64) -> Result<Dataset> {
    let per: usize = dims.iter().product();
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..per).map(|_| template_rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split + 1);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::config(e.to_string()))?;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        images.extend(templates[c].iter().map(|&v| v + normal.sample(&mut rng)));
        labels.push(c as u8);
    }
    Dataset::new(images, labels, dims.to_vec(), classes)
}

/// Training and validation sets for a run.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = match cfg.id {
        DatasetId::Mnist => {
            let dir = cfg.resolve_path();
            (load_mnist(&dir, true)?, load_mnist(&dir, false)?)
        }
        DatasetId::Cifar10 => {
            let dir = cfg.resolve_path();
            (load_cifar10(&dir, true)?, load_cifar10(&dir, false)?)
        }
        DatasetId::Synthetic => (
            synthetic(cfg.synthetic_train, &[1, 12, 12], 10, 0.35, seed, 0)?,
            synthetic(cfg.synthetic_val, &[1, 12, 12], 10, 0.35, seed, 1)?,
        ),
    };
    let cut = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n) };
    Ok((cut(train, cfg.train_subset), cut(val, cfg.val_subset)))
}
