//! Declarative model descriptions and the CIFAR presets.
//!
//! The presets follow the ConvPool-CNN-C layout: three stride-1 3×3-class
//! convolutions per block, 2×2 max-pooling between blocks, a final 3×3 and
//! 1×1 convolution, global average pooling and a linear soft-max
//! classifier. Dropout is applied to the input (0.2) and after every
//! max-pool (0.5). The full-scale widths are 96/192 (square and QH-A),
//! 108/217 (QH-B) and 128/256/384 (QH-C).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::kernel::{make_mask, sample_pattern_sequence, KernelMask, Orientation, ShapeKind};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride 1, zero padding of the mask radius.
    MaskedConv { in_ch: usize, out_ch: usize, mask: KernelMask },
    Conv1x1 { in_ch: usize, out_ch: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    Dropout { rate: f64 },
    GlobalAvgPool,
    /// Linear map to class scores; the soft-max lives in the loss.
    SoftmaxClassifier { in_features: usize, classes: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::MaskedConv { .. } | LayerSpec::Conv1x1 { .. } | LayerSpec::SoftmaxClassifier { .. })
    }

    pub fn name(&self) -> String {
        match self {
            LayerSpec::MaskedConv { out_ch, mask, .. } => format!("conv-{}-{out_ch}", mask.label()),
            LayerSpec::Conv1x1 { out_ch, .. } => format!("conv-1x1-{out_ch}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool { k, stride } => format!("maxpool-{k}/{stride}"),
            LayerSpec::Dropout { rate } => format!("dropout-{rate}"),
            LayerSpec::GlobalAvgPool => "global-avgpool".into(),
            LayerSpec::SoftmaxClassifier { classes, .. } => format!("softmax-{classes}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub pattern_seed: u64,
}

impl ModelConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::SoftmaxClassifier { classes, .. } => Some(*classes),
            _ => None,
        })
    }

    /// Index of the last max-pool layer.
    pub fn last_maxpool(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::MaxPool { .. }))
    }

    /// Masks of the 3×3-class convolutions in order.
    pub fn masks(&self) -> Vec<&KernelMask> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::MaskedConv { mask, .. } => Some(mask),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Square 3×3 kernels.
    BaseA,
    /// QH kernels, random pattern per layer, same widths as `BaseA`.
    QhA,
    /// QH kernels with widths grown to roughly match `BaseA`'s parameter count.
    QhB,
    /// QH kernels, larger model.
    QhC,
    /// Fragmented 3×3 kernels with two seeded cells removed per layer.
    BaseRef,
    /// QH kernels with pattern `R` on every layer.
    QhExt,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::BaseA, Preset::QhA, Preset::QhB, Preset::QhC, Preset::BaseRef, Preset::QhExt];

    pub fn base_name(self) -> &'static str {
        match self {
            Preset::BaseA => "BASE-A",
            Preset::QhA => "QH-A",
            Preset::QhB => "QH-B",
            Preset::QhC => "QH-C",
            Preset::BaseRef => "BASE-REF",
            Preset::QhExt => "QH-EXT",
        }
    }

    /// Preset name at the given channel scale; scaled presets carry `-mini`.
    pub fn name(self, scale: usize) -> String {
        if scale == 1 {
            self.base_name().to_string()
        } else {
            format!("{}-mini", self.base_name())
        }
    }

    /// Full-scale channel widths of the first block, second block and the
    /// final 3×3 / 1×1 pair.
    fn full_widths(self) -> [usize; 3] {
        match self {
            Preset::BaseA | Preset::QhA | Preset::BaseRef | Preset::QhExt => [96, 192, 192],
            Preset::QhB => [108, 217, 217],
            Preset::QhC => [128, 256, 384],
        }
    }

    fn widths(self, scale: usize) -> [usize; 3] {
        if scale == 1 {
            return self.full_widths();
        }
        let base = [96, 192, 192].map(|w: usize| (w / scale).max(1));
        match self {
            // Parameters grow with width², so widen by sqrt(9/7); at full
            // scale this reproduces 108 and 217.
            Preset::QhB => base.map(|w| ((w as f64) * (9.0f64 / 7.0).sqrt()).floor() as usize),
            Preset::QhC => self.full_widths().map(|w| (w / scale).max(1)),
            _ => base,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base_name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let base = up.strip_suffix("-MINI").unwrap_or(&up);
        Preset::ALL
            .into_iter()
            .find(|p| p.base_name() == base)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

/// Number of 3×3-class convolutions in every preset.
pub const PRESET_CONV_LAYERS: usize = 7;

/// Build a preset description.
///
/// `scale` divides the full-scale widths (1 = Table widths). QH presets draw
/// one orientation per 3×3-class layer from `pattern_seed`; `BASE-REF`
/// derives each layer's fragment seed from it.
pub fn preset(preset: Preset, scale: usize, classes: usize, pattern_seed: u64) -> Result<ModelConfig> {
    if scale == 0 {
        return invalid("scale must be at least 1");
    }
    if classes < 2 {
        return invalid("at least two classes are required");
    }
    let masks: Vec<KernelMask> = match preset {
        Preset::BaseA => vec![KernelMask::full_square(3)?; PRESET_CONV_LAYERS],
        Preset::QhA | Preset::QhB | Preset::QhC => {
            sample_pattern_sequence(PRESET_CONV_LAYERS, pattern_seed)?.masks()
        }
        Preset::QhExt => vec![KernelMask::qh(Orientation::R); PRESET_CONV_LAYERS],
        Preset::BaseRef => (0..PRESET_CONV_LAYERS)
            .map(|i| make_mask(ShapeKind::Fk, None, 3, Some(derive_seed(pattern_seed, i as u64))))
            .collect::<Result<_>>()?,
    };
    let [w1, w2, w3] = preset.widths(scale);

    let mut layers = vec![LayerSpec::Dropout { rate: 0.2 }];
    let mut masks = masks.into_iter();
    let mut in_ch = 3;
    let mut conv = |layers: &mut Vec<LayerSpec>, out_ch: usize| {
        layers.push(LayerSpec::MaskedConv { in_ch, out_ch, mask: masks.next().expect("seven masks") });
        layers.push(LayerSpec::Relu);
        in_ch = out_ch;
    };
    for width in [w1, w2] {
        for _ in 0..3 {
            conv(&mut layers, width);
        }
        layers.push(LayerSpec::MaxPool { k: 2, stride: 2 });
        layers.push(LayerSpec::Dropout { rate: 0.5 });
    }
    conv(&mut layers, w3);
    layers.push(LayerSpec::Conv1x1 { in_ch: w3, out_ch: w3 });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::SoftmaxClassifier { in_features: w3, classes });

    Ok(ModelConfig { name: preset.name(scale), input: [3, 32, 32], layers, pattern_seed })
}

/// Check channel compatibility and spatial feasibility of a layer stack.
/// Returns the output shape `(c, h, w)` after every layer; rank-2 outputs
/// report `h = w = 0`.
pub fn infer_shapes(config: &ModelConfig) -> Result<Vec<[usize; 3]>> {
    let [mut c, mut h, mut w] = config.input;
    let mut flat = false;
    let mut out = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        let bad = |msg: String| Err(Error::ShapeMismatch(format!("layer {i} ({}): {msg}", layer.name())));
        match layer {
            LayerSpec::MaskedConv { in_ch, out_ch, .. } | LayerSpec::Conv1x1 { in_ch, out_ch } => {
                if flat {
                    return bad("convolution after flattening".into());
                }
                if *in_ch != c {
                    return bad(format!("expects {in_ch} input channels, got {c}"));
                }
                if *out_ch == 0 {
                    return bad("zero output channels".into());
                }
                c = *out_ch;
            }
            LayerSpec::MaxPool { k, stride } => {
                if flat || *k == 0 || *stride == 0 || *k > h || *k > w {
                    return bad(format!("cannot pool {h}x{w} with k={k} stride={stride}"));
                }
                h = (h - k) / stride + 1;
                w = (w - k) / stride + 1;
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
            }
            LayerSpec::Relu => {}
            LayerSpec::GlobalAvgPool => {
                if flat {
                    return bad("already pooled".into());
                }
                flat = true;
                h = 0;
                w = 0;
            }
            LayerSpec::SoftmaxClassifier { in_features, classes } => {
                if !flat {
                    return bad("classifier needs a pooled input".into());
                }
                if *in_features != c {
                    return bad(format!("expects {in_features} features, got {c}"));
                }
                c = *classes;
            }
        }
        out.push([c, h, w]);
    }
    Ok(out)
}
