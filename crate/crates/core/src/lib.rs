//! Masked-kernel convolutional networks with quasi-hexagonal receptive
//! fields: kernel shapes, receptive-field statistics, a small CPU training
//! engine, CIFAR preprocessing, saliency maps and occlusion experiments.

pub mod container;
pub mod data;
pub mod error;
pub mod kernel;
pub mod nn;
pub mod occlusion;
pub mod rf;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use kernel::{
    compose_rf, make_mask, mask_weight_count, sample_pattern_sequence, Footprint, KernelMask, Offset, Orientation,
    PatternSequence, ShapeKind,
};
pub use rf::{rf_distance, simulate_rf, CoverageMatrix, RfStats};
pub use tensor::{DType, Scalar, Tensor};
