//! Tensor layers, models, SGD training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{infer_shapes, preset, LayerSpec, ModelConfig, Preset, PRESET_CONV_LAYERS};
pub use model::{softmax, softmax_cross_entropy, Gradients, Layer, LayerAccount, Mode, Model, ParamGrad, Trace};
pub use optim::{sgd_step, sgd_step_with, HyperParams, SgdState};
pub use train::{
    argmax_rows, evaluate, init_checkpoint, mean_loss, metrics_tsv, predict, resume, train, EpochMetrics,
    METRICS_HEADER,
};
