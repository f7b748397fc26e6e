use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Class-balanced random subset of `n_total / class_count` images per class,
/// in a seeded random order. A remainder is dropped with a warning.
pub fn subsample(ds: &Dataset, n_total: usize, seed: u64) -> Result<Dataset> {
    if n_total > ds.len() {
        return invalid(format!("cannot draw {n_total} images from {}", ds.len()));
    }
    let per_class = n_total / ds.class_count;
    if per_class == 0 {
        return invalid(format!("{n_total} images is fewer than one per class"));
    }
    if n_total % ds.class_count != 0 {
        log::warn!(
            "{n_total} is not divisible by {} classes; drawing {per_class} per class",
            ds.class_count
        );
    }
    let mut g = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * ds.class_count);
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per_class {
            return invalid(format!("class {class} has only {} images, need {per_class}", idx.len()));
        }
        idx.shuffle(&mut g);
        chosen.extend_from_slice(&idx[..per_class]);
    }
    chosen.shuffle(&mut g);
    ds.select(&chosen)
}

/// Seeded permutation of `0..n` cut into batches; the last one may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(shuffle_seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        let labels = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Some((self.ds.images.select(&idx), labels))
    }
}

/// Iterate over `(images, labels)` mini-batches in a seeded order.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Batches<'_> {
    Batches { ds, batches: batch_indices(ds.len(), batch_size, shuffle_seed).into_iter() }
}
