//! SGD with momentum and L2 weight decay.
//!
//! Full-length schedule: 270 epochs, learning rate 5e-2 divided by 10 after
//! epochs 120, 170 and 220. Shorter runs scale the milestones
//! proportionally. The weight-decay multiplier falls linearly from its
//! initial value to a tenth of it over the final third of training.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::model::{Gradients, Model};
use crate::tensor::Scalar;

pub const FULL_EPOCHS: usize = 270;
pub const FULL_MILESTONES: [usize; 3] = [120, 170, 220];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr_init: f64,
    /// 0-based epochs from which the learning rate is multiplied by 0.1.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weight_decay_final: f64,
    /// First 0-based epoch of the linear weight-decay ramp.
    pub wd_decay_start: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::scaled(FULL_EPOCHS)
    }
}

impl HyperParams {
    /// Default hyperparameters with the schedule scaled to `epochs`.
    pub fn scaled(epochs: usize) -> Self {
        let epochs = epochs.max(1);
        let scale = |e: usize| ((e * epochs) as f64 / FULL_EPOCHS as f64).round() as usize;
        Self {
            lr_init: 5e-2,
            lr_milestones: FULL_MILESTONES.iter().map(|&m| scale(m)).collect(),
            momentum: 0.9,
            weight_decay: 1e-3,
            weight_decay_final: 1e-4,
            wd_decay_start: epochs - (epochs as f64 / 3.0).round() as usize,
            batch_size: 128,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return invalid("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.weight_decay_final < 0.0 {
            return invalid("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return invalid("batch size and epochs must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr_init * 0.1f64.powi(drops as i32)
    }

    pub fn wd(&self, epoch: usize) -> f64 {
        if epoch < self.wd_decay_start {
            return self.weight_decay;
        }
        let span = self.epochs.saturating_sub(1).saturating_sub(self.wd_decay_start);
        let t = if span == 0 { 1.0 } else { ((epoch - self.wd_decay_start) as f64 / span as f64).min(1.0) };
        self.weight_decay + (self.weight_decay_final - self.weight_decay) * t
    }
}

/// Momentum buffers, one per parameter array in [`Model::param_arrays`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self { velocity: model.param_arrays().iter().map(|(_, a)| vec![T::zero(); a.len()]).collect() }
    }
}

/// `v ← m·v − lr·(g + wd·w)`, `w ← w + v`.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut SgdState<T>,
    grads: &Gradients<T>,
    hyper: &HyperParams,
    epoch: usize,
) -> Result<()> {
    sgd_step_with(model, state, grads, hyper.momentum, hyper.lr(epoch), hyper.wd(epoch))
}

pub fn sgd_step_with<T: Scalar>(
    model: &mut Model<T>,
    state: &mut SgdState<T>,
    grads: &Gradients<T>,
    momentum: f64,
    lr: f64,
    wd: f64,
) -> Result<()> {
    let (m, lr, wd) = (T::lit(momentum), T::lit(lr), T::lit(wd));
    let mut flat: Vec<&[T]> = Vec::new();
    for g in grads.layers.iter().flatten() {
        flat.push(&g.weight);
        flat.push(&g.bias);
    }
    let params = model.param_arrays_mut();
    if flat.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient arrays and {} momentum buffers for {} parameter arrays",
            flat.len(),
            state.velocity.len(),
            params.len()
        )));
    }
    for (((name, w), g), v) in params.into_iter().zip(flat).zip(state.velocity.iter_mut()) {
        if w.len() != g.len() || v.len() != w.len() {
            return Err(Error::ShapeMismatch(format!("gradient for {name} has the wrong length")));
        }
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi - lr * (gi + wd * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule() {
        let h = HyperParams::default();
        assert_eq!(h.lr_milestones, vec![120, 170, 220]);
        assert_eq!(h.lr(0), 5e-2);
        assert_eq!(h.lr(119), 5e-2);
        assert!((h.lr(120) - 5e-3).abs() < 1e-15);
        assert!((h.lr(269) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn scaled_schedule_hits_every_rate() {
        let h = HyperParams::scaled(20);
        assert_eq!(h.lr_milestones, vec![9, 13, 16]);
        let mut rates: Vec<f64> = (0..20).map(|e| h.lr(e)).collect();
        rates.dedup();
        let want = [5e-2, 5e-3, 5e-4, 5e-5];
        assert_eq!(rates.len(), 4);
        for (a, b) in rates.iter().zip(want) {
            assert!((a - b).abs() < 1e-15 * b.max(1.0));
        }
    }

    #[test]
    fn weight_decay_ramp() {
        let h = HyperParams::scaled(30);
        assert_eq!(h.wd_decay_start, 20);
        assert_eq!(h.wd(0), 1e-3);
        assert_eq!(h.wd(19), 1e-3);
        assert_eq!(h.wd(20), 1e-3);
        assert!((h.wd(29) - 1e-4).abs() < 1e-15);
        assert!(h.wd(25) < 1e-3 && h.wd(25) > 1e-4);
    }

    #[test]
    fn validation() {
        let mut h = HyperParams::scaled(5);
        assert!(h.validate().is_ok());
        h.momentum = 1.0;
        assert!(h.validate().is_err());
        h.momentum = 0.9;
        h.lr_init = 0.0;
        assert!(h.validate().is_err());
    }
}
