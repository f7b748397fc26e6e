//! CIFAR binary batches.
//!
//! Each record is a label byte (two for CIFAR-100: coarse then fine; the
//! fine label is used) followed by 3072 pixel bytes, stored as the 1024-byte
//! red, green and blue planes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXELS_PER_IMAGE: usize = 3 * 32 * 32;

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFlavor {
    Cifar10,
    Cifar100,
}

impl CifarFlavor {
    fn label_bytes(self) -> usize {
        match self {
            CifarFlavor::Cifar10 => 1,
            CifarFlavor::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarFlavor::Cifar10 => 10,
            CifarFlavor::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS_PER_IMAGE
    }
}

/// Parse one or more batch files into a dataset with pixels scaled to [0, 1].
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], flavor: CifarFlavor, split: &str) -> Result<Dataset> {
    let rec = flavor.record_len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() {
            return Err(Error::Format(format!("{}: empty file", path.display())));
        }
        if bytes.len() % rec != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {rec}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for r in bytes.chunks_exact(rec) {
            let label = r[flavor.label_bytes() - 1] as usize;
            if label >= flavor.classes() {
                return Err(Error::Format(format!("{}: label {label} out of range", path.display())));
            }
            labels.push(label);
            pixels.extend(r[flavor.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("no CIFAR files given".into()));
    }
    let images = Tensor::from_vec(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, flavor.classes(), split)
}

/// Write a dataset in CIFAR binary layout. Pixels are rounded to bytes;
/// CIFAR-100 records carry the fine label in both label slots.
pub fn write_cifar_binary(ds: &Dataset, path: impl AsRef<Path>, flavor: CifarFlavor) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::ShapeMismatch(format!("CIFAR images are 3x32x32, got {:?}", ds.image_shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * flavor.record_len());
    for (i, &label) in ds.labels.iter().enumerate() {
        for _ in 0..flavor.label_bytes() {
            out.push(label as u8);
        }
        out.extend(ds.images.item(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `data_batch_1.bin` … `data_batch_5.bin` inside a `cifar-10-batches-bin` directory.
pub fn cifar10_train_files(dir: impl AsRef<Path>) -> Vec<PathBuf> {
    (1..=5).map(|i| dir.as_ref().join(format!("data_batch_{i}.bin"))).collect()
}

pub fn cifar10_test_file(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join("test_batch.bin")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 3, 32, 32], |i| ((i * 37) % 256) as f32 / 255.0);
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, "train").unwrap()
    }

    #[test]
    fn roundtrip_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic(2);
        for flavor in [CifarFlavor::Cifar10, CifarFlavor::Cifar100] {
            let p = dir.path().join("b.bin");
            write_cifar_binary(&ds, &p, flavor).unwrap();
            assert_eq!(fs::metadata(&p).unwrap().len() as usize, 2 * flavor.record_len());
            let back = load_cifar_binary(&[&p], flavor, "train").unwrap();
            assert_eq!(back.labels, ds.labels);
            assert_eq!(back.images, ds.images);
        }
    }

    #[test]
    fn empty_and_truncated_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.bin");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(load_cifar_binary(&[&empty], CifarFlavor::Cifar10, "x"), Err(Error::Format(_))));
        let short = dir.path().join("s.bin");
        fs::write(&short, vec![0u8; 3073 + 10]).unwrap();
        assert!(matches!(load_cifar_binary(&[&short], CifarFlavor::Cifar10, "x"), Err(Error::Format(_))));
        assert!(load_cifar_binary(&[dir.path().join("missing.bin")], CifarFlavor::Cifar10, "x").is_err());
    }

    #[test]
    fn record_count_from_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![3u8; 3073 * 7]).unwrap();
        let ds = load_cifar_binary(&[&p], CifarFlavor::Cifar10, "x").unwrap();
        assert_eq!(ds.len(), 7);
        assert!(ds.labels.iter().all(|&l| l == 3));
    }
}
