//! Mini-batch training loop, evaluation and the per-epoch metrics log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::config::ModelConfig;
use crate::nn::model::{softmax_cross_entropy, Mode, Model};
use crate::nn::optim::{sgd_step, HyperParams, SgdState};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub wd: f64,
    pub train_loss: f64,
    /// `None` when no test split was supplied.
    pub test_error: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch\tlr\twd\ttrain_loss\ttest_error";

impl EpochMetrics {
    pub fn to_record(&self) -> String {
        let err = self.test_error.map_or_else(|| "nan".to_string(), |e| format!("{e:.6}"));
        format!("{}\t{:e}\t{:e}\t{:.6}\t{err}", self.epoch, self.lr, self.wd, self.train_loss)
    }
}

/// Tab-separated log, header line first.
pub fn metrics_tsv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_record());
    }
    s
}

/// Freshly initialised checkpoint at epoch 0.
pub fn init_checkpoint(config: &ModelConfig, hyper: &HyperParams, seed: u64, preprocess_digest: &str) -> Result<Checkpoint> {
    hyper.validate()?;
    let model = Model::build(config, derive_seed(seed, INIT_STREAM))?;
    let optimizer = SgdState::new(&model);
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: 0,
        seed,
        hyper: hyper.clone(),
        preprocess_digest: preprocess_digest.to_string(),
        metrics: Vec::new(),
    })
}

/// Train from scratch for `hyper.epochs` epochs.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    hyper: &HyperParams,
    seed: u64,
    preprocess_digest: &str,
) -> Result<Checkpoint> {
    let mut ckpt = init_checkpoint(config, hyper, seed, preprocess_digest)?;
    resume(&mut ckpt, train_set, test_set, hyper.epochs, |_| Ok(()))?;
    Ok(ckpt)
}

/// Continue training `ckpt` until `until_epoch` epochs are complete,
/// calling `on_epoch` after each one (e.g. to save a checkpoint). Every
/// random draw depends only on the seed and the epoch, so stopping and
/// resuming reproduces an uninterrupted run.
pub fn resume(
    ckpt: &mut Checkpoint,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    until_epoch: usize,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<()> {
    ckpt.hyper.validate()?;
    let until = until_epoch.min(ckpt.hyper.epochs);
    while ckpt.epoch < until {
        let epoch = ckpt.epoch;
        let train_loss = run_epoch(ckpt, train_set, epoch)?;
        let test_error = test_set.map(|t| evaluate(&ckpt.model, t)).transpose()?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr: ckpt.hyper.lr(epoch),
            wd: ckpt.hyper.wd(epoch),
            train_loss,
            test_error,
        };
        log::info!("{}", row.to_record());
        ckpt.metrics.push(row);
        ckpt.epoch += 1;
        on_epoch(ckpt)?;
    }
    Ok(())
}

fn run_epoch(ckpt: &mut Checkpoint, ds: &Dataset, epoch: usize) -> Result<f64> {
    let order = batch_indices(ds.len(), ckpt.hyper.batch_size, derive_seed(derive_seed(ckpt.seed, SHUFFLE_STREAM), epoch as u64));
    let dropout_base = derive_seed(derive_seed(ckpt.seed, DROPOUT_STREAM), epoch as u64);
    let mut total = 0.0;
    for (b, idx) in order.iter().enumerate() {
        let x = ds.images.select(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let trace = ckpt.model.forward_trace(&x, Mode::Train { seed: derive_seed(dropout_base, b as u64) })?;
        let (loss, grad) = softmax_cross_entropy(trace.output(), &labels)?;
        if !loss.is_finite() {
            return Err(Error::EngineFault(format!("training diverged: loss {loss} in epoch {}", epoch + 1)));
        }
        let grads = ckpt.model.backward(&trace, &grad, true, false)?;
        sgd_step(&mut ckpt.model, &mut ckpt.optimizer, &grads, &ckpt.hyper, epoch)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Eval-mode scores for every image, computed in chunks.
pub fn predict<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let n = images.batch();
    let mut out = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let s = model.forward(&images.select(&idx), Mode::Eval)?;
        classes = s.shape()[1];
        out.extend_from_slice(s.data());
    }
    Tensor::from_vec(&[n, classes], out)
}

/// Index of the highest score per row; ties go to the lower class.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of misclassified images.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<f64> {
    let pred = argmax_rows(&predict(model, &ds.images)?);
    let wrong = pred.iter().zip(&ds.labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / ds.len() as f64)
}

/// Eval-mode mean cross-entropy over a dataset.
pub fn mean_loss(model: &Model<f32>, ds: &Dataset) -> Result<f64> {
    let scores = predict(model, &ds.images)?;
    Ok(softmax_cross_entropy(&scores, &ds.labels)?.0)
}
