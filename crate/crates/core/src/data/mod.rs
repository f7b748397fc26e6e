//! Datasets, CIFAR ingestion and preprocessing.

mod cifar;
mod preprocess;
mod sampling;
pub mod synth;

pub use cifar::{
    cifar10_test_file, cifar10_train_files, load_cifar_binary, write_cifar_binary, CifarFlavor, CIFAR10_CLASSES,
    PIXELS_PER_IMAGE,
};
pub use preprocess::{gcn, gcn_item, zca_apply, zca_fit, zca_fit_rows, Preprocessor, ZcaTransform, DEFAULT_ZCA_EPSILON, GCN_FLOOR};
pub use sampling::{batch_indices, batches, subsample, Batches};

use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, 3, 32, 32)` for CIFAR.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    class_count: usize,
    split: String,
    preprocess_digest: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("dataset images must be rank 4, got {:?}", images.shape())));
        }
        if labels.is_empty() || labels.len() != images.batch() {
            return invalid(format!("{} labels for {} images", labels.len(), images.batch()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return invalid(format!("label {bad} out of range for {class_count} classes"));
        }
        Ok(Self { images, labels, class_count, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return invalid("cannot select an empty subset");
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return invalid(format!("index {i} out of range for {} images", self.len()));
        }
        Ok(Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split.clone(),
        })
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Same images with a transformation applied.
    pub fn map_images(&self, images: Tensor<f32>) -> Result<Self> {
        Self::new(images, self.labels.clone(), self.class_count, self.split.clone())
    }

    pub fn to_container(&self, preprocess_digest: &str) -> Result<Container> {
        let meta = DatasetMeta {
            class_count: self.class_count,
            split: self.split.clone(),
            preprocess_digest: preprocess_digest.to_string(),
        };
        let mut c = Container::new("dataset", preprocess_digest);
        c.push_text("meta", &serde_json::to_string(&meta)?)?;
        c.push("images", self.images.shape(), ArrayData::F32(self.images.data().to_vec()))?;
        c.push("labels", &[self.len()], ArrayData::U64(self.labels.iter().map(|&l| l as u64).collect()))?;
        Ok(c)
    }

    /// Returns the dataset and the preprocessing digest recorded with it.
    pub fn from_container(c: &Container) -> Result<(Self, String)> {
        if c.kind != "dataset" {
            return Err(Error::Format(format!("expected a dataset container, got {:?}", c.kind)));
        }
        let meta: DatasetMeta = serde_json::from_str(&c.text("meta")?)?;
        let arr = c.get("images")?;
        let images = Tensor::from_vec(&arr.shape, c.f32s("images")?.to_vec())?;
        let labels = c.u64s("labels")?.iter().map(|&l| l as usize).collect();
        Ok((Self::new(images, labels, meta.class_count, meta.split)?, meta.preprocess_digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let imgs = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        assert!(Dataset::new(imgs.clone(), vec![0, 1], 2, "t").is_ok());
        assert!(Dataset::new(imgs.clone(), vec![0, 2], 2, "t").is_err());
        assert!(Dataset::new(imgs, vec![0], 2, "t").is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let imgs = Tensor::from_fn(&[3, 3, 2, 2], |i| i as f32 * 0.25);
        let ds = Dataset::new(imgs, vec![2, 0, 1], 3, "train").unwrap();
        let c = ds.to_container("feed").unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let (back, digest) = Dataset::from_container(&Container::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(digest, "feed");
    }
}
