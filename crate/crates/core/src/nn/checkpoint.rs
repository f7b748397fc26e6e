//! Training checkpoints in the named-array container.
//!
//! Arrays: `meta` (JSON text), `config` (model JSON), the packed
//! `layerN.weight` / `layerN.bias` parameters, and `velocity.layerN.*`
//! momentum buffers. The container digest is the model config digest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::nn::config::ModelConfig;
use crate::nn::model::Model;
use crate::nn::optim::{HyperParams, SgdState};
use crate::nn::train::EpochMetrics;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: SgdState<f32>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Training seed; together with `epoch` it fixes every later random draw.
    pub seed: u64,
    pub hyper: HyperParams,
    pub preprocess_digest: String,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    seed: u64,
    hyper: HyperParams,
    preprocess_digest: String,
    metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            epoch: self.epoch,
            seed: self.seed,
            hyper: self.hyper.clone(),
            preprocess_digest: self.preprocess_digest.clone(),
            metrics: self.metrics.clone(),
        };
        let mut c = Container::new("checkpoint", &self.config().digest());
        c.push_text("meta", &serde_json::to_string(&meta)?)?;
        c.push_text("config", &self.config().to_json())?;
        let params = self.model.param_arrays();
        if params.len() != self.optimizer.velocity.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match the model".into()));
        }
        for ((name, p), v) in params.iter().zip(&self.optimizer.velocity) {
            c.push(name.clone(), &[p.len()], ArrayData::F32(p.to_vec()))?;
            c.push(format!("velocity.{name}"), &[v.len()], ArrayData::F32(v.clone()))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a checkpoint container, got {:?}", c.kind)));
        }
        let config = ModelConfig::from_json(&c.text("config")?)?;
        if config.digest() != c.digest {
            return Err(Error::Format("checkpoint config does not match its digest".into()));
        }
        let meta: Meta = serde_json::from_str(&c.text("meta")?)?;
        let mut model = Model::<f32>::zeros(&config)?;
        let mut velocity = Vec::new();
        for (name, p) in model.param_arrays_mut() {
            let stored = c.f32s(&name)?;
            if stored.len() != p.len() {
                return Err(Error::Format(format!("{name}: {} values, model needs {}", stored.len(), p.len())));
            }
            p.copy_from_slice(stored);
            let v = c.f32s(&format!("velocity.{name}"))?;
            if v.len() != p.len() {
                return Err(Error::Format(format!("velocity for {name} has the wrong length")));
            }
            velocity.push(v.to_vec());
        }
        Ok(Self {
            model,
            optimizer: SgdState { velocity },
            epoch: meta.epoch,
            seed: meta.seed,
            hyper: meta.hyper,
            preprocess_digest: meta.preprocess_digest,
            metrics: meta.metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Fail unless the data fed to this model went through the same
    /// preprocessing it was trained with.
    pub fn verify_preprocess(&self, digest: &str) -> Result<()> {
        if self.preprocess_digest != digest {
            return Err(Error::InvalidArgument(format!(
                "data preprocessed with {digest}, model trained on {}",
                self.preprocess_digest
            )));
        }
        Ok(())
    }
}
