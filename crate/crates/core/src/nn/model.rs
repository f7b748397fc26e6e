use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::Offset;
use crate::nn::config::{infer_shapes, LayerSpec, ModelConfig};
use crate::nn::layers::{self, Conv, Linear};
use crate::rng::{self, derive_seed};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks are drawn from streams derived from `seed`.
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Relu,
    MaxPool { k: usize, stride: usize },
    Dropout { rate: f64 },
    GlobalAvgPool,
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    fn from_spec(spec: &LayerSpec) -> Self {
        match spec {
            LayerSpec::MaskedConv { in_ch, out_ch, mask } => Layer::Conv(Conv::zeros(*in_ch, *out_ch, mask.cells().to_vec())),
            LayerSpec::Conv1x1 { in_ch, out_ch } => Layer::Conv(Conv::zeros(*in_ch, *out_ch, vec![(0, 0)])),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { k, stride } => Layer::MaxPool { k: *k, stride: *stride },
            LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::SoftmaxClassifier { in_features, classes } => Layer::Linear(Linear::zeros(*in_features, *classes)),
        }
    }

    /// `(weight, bias)` of a parametric layer.
    pub fn params(&self) -> Option<(&[T], &[T])> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv(c) => c.in_ch * c.cells(),
            Layer::Linear(l) => l.in_features,
            _ => 0,
        }
    }
}

/// Per-layer state a backward pass needs besides the layer input.
#[derive(Debug, Clone)]
pub enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Activations recorded by a forward pass over layers `start..start + aux.len()`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub start: usize,
    /// `acts[j]` is the input of layer `start + j`; the last entry is the output.
    pub acts: Vec<Tensor<T>>,
    pub aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the input")
    }

    pub fn end(&self) -> usize {
        self.start + self.aux.len()
    }

    /// Output of layer `layer` (which must lie inside the traced range).
    pub fn layer_output(&self, layer: usize) -> Option<&Tensor<T>> {
        if layer < self.start || layer >= self.end() {
            return None;
        }
        self.acts.get(layer - self.start + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per model layer; `None` for parameter-free layers and for
    /// layers outside the traced range.
    pub layers: Vec<Option<ParamGrad<T>>>,
    pub input: Option<Tensor<T>>,
}

/// Rows of a parameter/MAC report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAccount {
    pub index: usize,
    pub name: String,
    pub weights: u64,
    pub biases: u64,
    pub macs: u64,
    /// Whether this is a 3×3-class (masked) convolution.
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    /// Output `(c, h, w)` of every layer for the configured input size.
    shapes: Vec<[usize; 3]>,
}

impl<T: Scalar> Model<T> {
    /// Model with all weights and biases zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let shapes = infer_shapes(config)?;
        let layers = config.layers.iter().map(Layer::from_spec).collect();
        Ok(Self { config: config.clone(), layers, shapes })
    }

    /// Build a model: weights ~ N(0, 2 / fan_in) where fan_in counts only the
    /// active mask cells, biases zero.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let fan_in = layer.fan_in();
            if let Some((w, _)) = layer.params_mut() {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut g = rng::stream(init_seed, i as u64);
                for v in w.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut g);
                    *v = T::lit(z * std);
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output `(c, h, w)` of layer `l`; `h = w = 0` after global pooling.
    pub fn output_shape(&self, l: usize) -> [usize; 3] {
        self.shapes[l]
    }

    /// Convert every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv {
                    in_ch: c.in_ch,
                    out_ch: c.out_ch,
                    offsets: c.offsets.clone(),
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::Linear(c) => Layer::Linear(Linear {
                    in_features: c.in_features,
                    out_features: c.out_features,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { k, stride } => Layer::MaxPool { k: *k, stride: *stride },
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            })
            .collect();
        Model { config: self.config.clone(), layers, shapes: self.shapes.clone() }
    }

    /// Flat view of every parameter array in layer order, weight before bias.
    pub fn param_arrays(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some((w, b)) = l.params() {
                out.push((format!("layer{i}.weight"), w));
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    pub fn param_arrays_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some((w, b)) = l.params_mut() {
                out.push((format!("layer{i}.weight"), w));
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>, start: usize) -> Result<()> {
        let expect = if start == 0 { self.config.input } else { self.shapes[start - 1] };
        let got = &x.shape()[1..];
        let ok = if expect[1] == 0 { got == [expect[0]] } else { got == expect };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "layer {start} expects items of shape {expect:?}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, i: usize, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Aux<T>) {
        match &self.layers[i] {
            Layer::Conv(c) => (c.forward(x), Aux::None),
            Layer::Relu => (layers::relu_forward(x), Aux::None),
            Layer::MaxPool { k, stride } => {
                let (y, a) = layers::maxpool_forward(x, *k, *stride);
                (y, Aux::Argmax(a))
            }
            Layer::Dropout { rate } => match mode {
                Mode::Train { seed } if *rate > 0.0 => {
                    let m = layers::dropout_mask(x.len(), *rate, derive_seed(seed, i as u64));
                    (layers::apply_mask(x, &m), Aux::Mask(m))
                }
                _ => (x.clone(), Aux::None),
            },
            Layer::GlobalAvgPool => (layers::gap_forward(x), Aux::None),
            Layer::Linear(l) => (l.forward(x), Aux::None),
        }
    }

    /// Run layers `start..end`, recording everything a backward pass needs.
    pub fn forward_range(&self, x: &Tensor<T>, start: usize, end: usize, mode: Mode) -> Result<Trace<T>> {
        if start > end || end > self.layers.len() {
            return Err(Error::InvalidArgument(format!("layer range {start}..{end} out of bounds")));
        }
        self.check_input(x, start)?;
        let mut acts = Vec::with_capacity(end - start + 1);
        let mut aux = Vec::with_capacity(end - start);
        acts.push(x.clone());
        for i in start..end {
            let (y, a) = self.layer_forward(i, acts.last().expect("non-empty"), mode);
            if !y.all_finite() {
                return Err(Error::EngineFault(format!(
                    "non-finite activation after layer {i} ({})",
                    self.config.layers[i].name()
                )));
            }
            acts.push(y);
            aux.push(a);
        }
        Ok(Trace { start, acts, aux })
    }

    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.forward_range(x, 0, self.layers.len(), mode)
    }

    /// Pre-softmax class scores, one row per batch item.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x, 0)?;
        let mut cur = x.clone();
        for i in 0..self.layers.len() {
            cur = self.layer_forward(i, &cur, mode).0;
            if !cur.all_finite() {
                return Err(Error::EngineFault(format!("non-finite activation after layer {i}")));
            }
        }
        Ok(cur)
    }

    /// Back-propagate `grad_out` (gradient w.r.t. the trace output) through
    /// the traced layers.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>, need_params: bool, need_input: bool) -> Result<Gradients<T>> {
        if trace.acts.len() != trace.aux.len() + 1 || trace.end() > self.layers.len() {
            return Err(Error::InvalidArgument("backward needs a trace from a forward pass of this model".into()));
        }
        if grad_out.shape() != trace.output().shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        let mut grads: Vec<Option<ParamGrad<T>>> = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for i in (trace.start..trace.end()).rev() {
            let j = i - trace.start;
            let x = &trace.acts[j];
            let y = &trace.acts[j + 1];
            let want_dx = need_input || i > trace.start;
            g = match (&self.layers[i], &trace.aux[j]) {
                (Layer::Conv(c), _) => {
                    let (dx, dw, db) = c.backward(x, &g, need_params, want_dx);
                    if need_params {
                        grads[i] = Some(ParamGrad { weight: dw, bias: db });
                    }
                    match dx {
                        Some(d) => d,
                        None => break,
                    }
                }
                (Layer::Linear(l), _) => {
                    let (dx, dw, db) = l.backward(x, &g, need_params);
                    if need_params {
                        grads[i] = Some(ParamGrad { weight: dw, bias: db });
                    }
                    dx
                }
                (Layer::Relu, _) => layers::relu_backward(y, &g),
                (Layer::MaxPool { .. }, Aux::Argmax(a)) => layers::maxpool_backward(x.shape(), a, &g),
                (Layer::Dropout { .. }, Aux::Mask(m)) => layers::apply_mask(&g, m),
                (Layer::Dropout { .. }, _) => g,
                (Layer::GlobalAvgPool, _) => layers::gap_backward(x.shape(), &g),
                (Layer::MaxPool { .. }, _) => {
                    return Err(Error::InvalidArgument("max-pool trace lacks argmax indices".into()))
                }
            };
        }
        Ok(Gradients { layers: grads, input: if need_input { Some(g) } else { None } })
    }

    pub fn count_params(&self) -> u64 {
        self.layers.iter().filter_map(|l| l.params()).map(|(w, b)| (w.len() + b.len()) as u64).sum()
    }

    /// Per-layer weights, biases and multiply-accumulates for one input
    /// image of shape `(c, h, w)`.
    pub fn account(&self, input: [usize; 3]) -> Result<Vec<LayerAccount>> {
        let mut cfg = self.config.clone();
        cfg.input = input;
        let shapes = infer_shapes(&cfg)?;
        let mut rows = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let [_, h, w] = shapes[i];
            let (weights, biases, macs, masked) = match layer {
                Layer::Conv(c) => (
                    c.weight.len() as u64,
                    c.bias.len() as u64,
                    c.macs(h, w),
                    matches!(self.config.layers[i], LayerSpec::MaskedConv { .. }),
                ),
                Layer::Linear(l) => (l.weight.len() as u64, l.bias.len() as u64, l.weight.len() as u64, false),
                _ => continue,
            };
            rows.push(LayerAccount { index: i, name: self.config.layers[i].name(), weights, biases, macs, masked });
        }
        Ok(rows)
    }

    pub fn count_macs(&self, input: [usize; 3]) -> Result<u64> {
        Ok(self.account(input)?.iter().map(|r| r.macs).sum())
    }

    /// Input pixels that can influence position `(row, col)` of layer `l`'s
    /// output, as a row-major `H × W` mask over the input image. Channel is
    /// irrelevant: every convolution mixes all input channels.
    pub fn receptive_field(&self, l: usize, row: usize, col: usize) -> Result<Vec<bool>> {
        let [_, h, w] = self.shapes[l];
        if row >= h.max(1) || col >= w.max(1) {
            return Err(Error::InvalidArgument(format!("position ({row}, {col}) outside layer {l}")));
        }
        let mut dims = (h, w);
        let mut set = vec![false; (h * w).max(1)];
        set[row * w.max(1) + col] = true;
        for i in (0..=l).rev() {
            let (ih, iw) = if i == 0 {
                (self.config.input[1], self.config.input[2])
            } else {
                let [_, a, b] = self.shapes[i - 1];
                (a, b)
            };
            let (oh, ow) = dims;
            let mut next = vec![false; ih * iw];
            match &self.layers[i] {
                Layer::Conv(c) => spread(&set, ow, &mut next, ih, iw, &c.offsets),
                Layer::MaxPool { k, stride } => {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if set[oy * ow + ox] {
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        next[(oy * stride + ky) * iw + ox * stride + kx] = true;
                                    }
                                }
                            }
                        }
                    }
                }
                Layer::GlobalAvgPool => next.fill(true),
                Layer::Linear(_) => next = vec![true],
                Layer::Relu | Layer::Dropout { .. } => {
                    if oh == 0 {
                        next = set.clone();
                    } else {
                        next.copy_from_slice(&set);
                    }
                }
            }
            set = next;
            dims = (ih, iw);
        }
        Ok(set)
    }
}

fn spread(set: &[bool], ow: usize, next: &mut [bool], ih: usize, iw: usize, offsets: &[Offset]) {
    for (p, _) in set.iter().enumerate().filter(|(_, &s)| s) {
        let (y, x) = ((p / ow) as i64, (p % ow) as i64);
        for &(dy, dx) in offsets {
            let (sy, sx) = (y + dy as i64, x + dx as i64);
            if sy >= 0 && sx >= 0 && (sy as usize) < ih && (sx as usize) < iw {
                next[sy as usize * iw + sx as usize] = true;
            }
        }
    }
}

/// Mean soft-max cross-entropy over the batch and its gradient w.r.t. the scores.
pub fn softmax_cross_entropy<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let n = scores.batch();
    if labels.len() != n || scores.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("{} labels for scores {:?}", labels.len(), scores.shape())));
    }
    let c = scores.shape()[1];
    let probs = softmax(scores);
    let mut grad = probs.clone();
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
        }
        let p = probs.item(i)[y].to_f64().unwrap_or(0.0);
        loss -= p.max(1e-300).ln();
        let row = grad.item_mut(i);
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((loss / n as f64, grad))
}

pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let mut out = scores.clone();
    let c = scores.shape()[1];
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}
