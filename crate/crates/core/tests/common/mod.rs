//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use qhconv::kernel::{KernelMask, Offset};
use qhconv::nn::layers::Conv;
use qhconv::rng;
use qhconv::Tensor;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut g = rng::seeded(seed);
    Tensor::from_fn(shape, |_| g.gen_range(-1.0..1.0))
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut g = rng::seeded(seed);
    (0..len).map(|_| g.gen_range(-1.0..1.0)).collect()
}

/// Packed masked weights scattered into a dense `out × in × 3 × 3` kernel.
pub fn dense_weights(conv: &Conv<f64>) -> Vec<f64> {
    let cells = conv.offsets.len();
    let mut d = vec![0.0; conv.out_ch * conv.in_ch * 9];
    for o in 0..conv.out_ch {
        for i in 0..conv.in_ch {
            for (k, &(dy, dx)) in conv.offsets.iter().enumerate() {
                let pos = ((dy + 1) * 3 + dx + 1) as usize;
                d[(o * conv.in_ch + i) * 9 + pos] = conv.weight[(o * conv.in_ch + i) * cells + k];
            }
        }
    }
    d
}

/// Textbook zero-padded 3×3 cross-correlation, direct loops.
pub fn dense_conv_forward(x: &Tensor<f64>, w: &[f64], b: &[f64], out_ch: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let mut y = Tensor::zeros(&[n, out_ch, h, wd]);
    for s in 0..n {
        for o in 0..out_ch {
            for r in 0..h {
                for q in 0..wd {
                    let mut acc = b[o];
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (r as i64 + ky as i64 - 1, q as i64 + kx as i64 - 1);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                    continue;
                                }
                                acc += w[(o * c + i) * 9 + ky * 3 + kx] * x.data()[((s * c + i) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    y.data_mut()[((s * out_ch + o) * h + r) * wd + q] = acc;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw dense, db)` for the dense oracle.
pub fn dense_conv_backward(x: &Tensor<f64>, w: &[f64], dy: &Tensor<f64>, out_ch: usize) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, wd) = x.dims4().unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_ch];
    for s in 0..n {
        for o in 0..out_ch {
            for r in 0..h {
                for q in 0..wd {
                    let g = dy.data()[((s * out_ch + o) * h + r) * wd + q];
                    db[o] += g;
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (r as i64 + ky as i64 - 1, q as i64 + kx as i64 - 1);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                    continue;
                                }
                                let xi = ((s * c + i) * h + sy as usize) * wd + sx as usize;
                                let wi = (o * c + i) * 9 + ky * 3 + kx;
                                dw[wi] += g * x.data()[xi];
                                dx.data_mut()[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Brute-force set dilation of mask cell sets.
pub fn brute_dilation(masks: &[KernelMask]) -> BTreeSet<Offset> {
    let mut acc: BTreeSet<Offset> = [(0, 0)].into_iter().collect();
    for m in masks {
        let mut next = BTreeSet::new();
        for &(ay, ax) in &acc {
            for &(by, bx) in m.cells() {
                next.insert((ay + by, ax + bx));
            }
        }
        acc = next;
    }
    acc
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` in coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

use qhconv::kernel::{make_mask, Orientation, ShapeKind};
use qhconv::nn::{softmax_cross_entropy, LayerSpec, Mode, Model, ModelConfig};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_norm_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-12)
}

pub fn config(input: [usize; 3], layers: Vec<LayerSpec>) -> ModelConfig {
    ModelConfig { name: "fixture".into(), input, layers, pattern_seed: 0 }
}

/// One-layer fixtures for every layer type (plus the pooling needed to
/// reach a classifier).
pub fn layer_fixtures() -> Vec<(String, ModelConfig, Mode)> {
    let conv = |mask| LayerSpec::MaskedConv { in_ch: 3, out_ch: 4, mask };
    let masks = [
        make_mask(ShapeKind::Square, None, 3, None).unwrap(),
        make_mask(ShapeKind::Qh, Some(Orientation::U), 3, None).unwrap(),
        make_mask(ShapeKind::Qh, Some(Orientation::L), 3, None).unwrap(),
        make_mask(ShapeKind::Fk, None, 3, Some(7)).unwrap(),
        make_mask(ShapeKind::Ub, Some(Orientation::R), 3, None).unwrap(),
        make_mask(ShapeKind::Dia, Some(Orientation::D), 3, None).unwrap(),
        make_mask(ShapeKind::Square, None, 5, None).unwrap(),
    ];
    let mut out: Vec<(String, ModelConfig, Mode)> =
        masks.into_iter().map(|m| (format!("conv {}", m.label()), config([3, 5, 5], vec![conv(m)]), Mode::Eval)).collect();
    out.push(("conv1x1".into(), config([3, 5, 5], vec![LayerSpec::Conv1x1 { in_ch: 3, out_ch: 2 }]), Mode::Eval));
    out.push(("relu".into(), config([3, 5, 5], vec![LayerSpec::Relu]), Mode::Eval));
    out.push(("maxpool 2/2".into(), config([3, 6, 6], vec![LayerSpec::MaxPool { k: 2, stride: 2 }]), Mode::Eval));
    out.push(("maxpool 3/2".into(), config([3, 7, 7], vec![LayerSpec::MaxPool { k: 3, stride: 2 }]), Mode::Eval));
    out.push(("dropout".into(), config([3, 5, 5], vec![LayerSpec::Dropout { rate: 0.5 }]), Mode::Train { seed: 11 }));
    out.push(("global avgpool".into(), config([3, 5, 5], vec![LayerSpec::GlobalAvgPool]), Mode::Eval));
    out.push((
        "linear".into(),
        config([3, 4, 4], vec![LayerSpec::GlobalAvgPool, LayerSpec::SoftmaxClassifier { in_features: 3, classes: 5 }]),
        Mode::Eval,
    ));
    out
}

/// Conv-QH → ReLU → max-pool → conv → ReLU → GAP → linear.
pub fn three_layer_config() -> ModelConfig {
    config(
        [2, 6, 6],
        vec![
            LayerSpec::MaskedConv { in_ch: 2, out_ch: 3, mask: make_mask(ShapeKind::Qh, Some(Orientation::R), 3, None).unwrap() },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Dropout { rate: 0.3 },
            LayerSpec::MaskedConv { in_ch: 3, out_ch: 4, mask: make_mask(ShapeKind::Qh, Some(Orientation::D), 3, None).unwrap() },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::SoftmaxClassifier { in_features: 4, classes: 3 },
        ],
    )
}

pub fn randomize(model: &mut Model<f64>, seed: u64) {
    for (k, (_, p)) in model.param_arrays_mut().into_iter().enumerate() {
        let v = random_vec(p.len(), rng::derive_seed(seed, 100 + k as u64));
        p.copy_from_slice(&v);
    }
}

pub fn set_params(model: &mut Model<f64>, flat: &[f64]) {
    let mut at = 0;
    for (_, p) in model.param_arrays_mut() {
        let n = p.len();
        p.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

pub fn get_params(model: &Model<f64>) -> Vec<f64> {
    model.param_arrays().into_iter().flat_map(|(_, p)| p.to_vec()).collect()
}

/// Worst relative error (input and parameter gradients) of the loss
/// `Σ r ⊙ output` against central differences with step `h`.
pub fn grad_check(cfg: &ModelConfig, mode: Mode, seed: u64, h: f64) -> (f64, f64) {
    let mut model = Model::<f64>::build(cfg, seed).unwrap();
    randomize(&mut model, seed);
    let mut x = random_tensor(&[2, cfg.input[0], cfg.input[1], cfg.input[2]], rng::derive_seed(seed, 1));
    let trace = model.forward_trace(&x, mode).unwrap();
    let r = random_tensor(trace.output().shape(), rng::derive_seed(seed, 2));
    let grads = model.backward(&trace, &r, true, true).unwrap();
    let loss = |m: &Model<f64>, x: &Tensor<f64>| -> f64 {
        m.forward(x, mode).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let shape = x.shape().to_vec();
    let mut fd_x = Vec::new();
    for i in 0..x.len() {
        fd_x.push(central_diff(x.data_mut(), i, h, |d| loss(&model, &Tensor::from_vec(&shape, d.to_vec()).unwrap())));
    }
    let in_err = rel_norm_err(grads.input.as_ref().unwrap().data(), &fd_x);

    let analytic: Vec<f64> = grads.layers.iter().flatten().flat_map(|g| g.weight.iter().chain(&g.bias).copied().collect::<Vec<_>>()).collect();
    let mut p = get_params(&model);
    let mut fd_p = Vec::new();
    let mut probe = model.clone();
    for i in 0..p.len() {
        fd_p.push(central_diff(&mut p, i, h, |v| {
            set_params(&mut probe, v);
            loss(&probe, &x)
        }));
    }
    let p_err = if p.is_empty() { 0.0 } else { rel_norm_err(&analytic, &fd_p) };
    (in_err, p_err)
}

/// Same check with the mean soft-max cross-entropy as the loss.
pub fn grad_check_ce(cfg: &ModelConfig, mode: Mode, seed: u64, h: f64) -> (f64, f64) {
    let mut model = Model::<f64>::build(cfg, seed).unwrap();
    randomize(&mut model, seed);
    let mut x = random_tensor(&[3, cfg.input[0], cfg.input[1], cfg.input[2]], rng::derive_seed(seed, 1));
    let classes = cfg.classes().unwrap();
    let labels: Vec<usize> = (0..3).map(|i| (i + seed as usize) % classes).collect();
    let trace = model.forward_trace(&x, mode).unwrap();
    let (_, g) = softmax_cross_entropy(trace.output(), &labels).unwrap();
    let grads = model.backward(&trace, &g, true, true).unwrap();
    let loss = |m: &Model<f64>, x: &Tensor<f64>| softmax_cross_entropy(&m.forward(x, mode).unwrap(), &labels).unwrap().0;

    let shape = x.shape().to_vec();
    let mut fd_x = Vec::new();
    for i in 0..x.len() {
        fd_x.push(central_diff(x.data_mut(), i, h, |d| loss(&model, &Tensor::from_vec(&shape, d.to_vec()).unwrap())));
    }
    let in_err = rel_norm_err(grads.input.as_ref().unwrap().data(), &fd_x);
    let analytic: Vec<f64> = grads.layers.iter().flatten().flat_map(|g| g.weight.iter().chain(&g.bias).copied().collect::<Vec<_>>()).collect();
    let mut p = get_params(&model);
    let mut probe = model.clone();
    let mut fd_p = Vec::new();
    for i in 0..p.len() {
        fd_p.push(central_diff(&mut p, i, h, |v| {
            set_params(&mut probe, v);
            loss(&probe, &x)
        }));
    }
    (in_err, rel_norm_err(&analytic, &fd_p))
}

/// Max |diff| between masked conv and the dense zero-filled oracle, over
/// forward output and all three backward results.
pub fn masked_vs_dense(mask: &KernelMask, seed: u64) -> f64 {
    let mut g = rng::seeded(seed);
    let (n, cin, cout, h, w) = (g.gen_range(1..3), g.gen_range(1..4), g.gen_range(1..4), g.gen_range(3..7), g.gen_range(3..7));
    let mut conv = Conv::<f64>::zeros(cin, cout, mask.cells().to_vec());
    conv.weight = random_vec(conv.weight.len(), rng::derive_seed(seed, 1));
    conv.bias = random_vec(cout, rng::derive_seed(seed, 2));
    let x = random_tensor(&[n, cin, h, w], rng::derive_seed(seed, 3));
    let dy = random_tensor(&[n, cout, h, w], rng::derive_seed(seed, 4));
    let dense = dense_weights(&conv);

    let y = conv.forward(&x);
    let y_ref = dense_conv_forward(&x, &dense, &conv.bias, cout);
    let (dx, dw, db) = conv.backward(&x, &dy, true, true);
    let (dx_ref, dw_ref, db_ref) = dense_conv_backward(&x, &dense, &dy, cout);
    let mut worst = y.max_abs_diff(&y_ref).max(dx.unwrap().max_abs_diff(&dx_ref));
    let cells = mask.cells().len();
    for o in 0..cout {
        for i in 0..cin {
            for (k, &(ky, kx)) in mask.cells().iter().enumerate() {
                let pos = ((ky + 1) * 3 + kx + 1) as usize;
                worst = worst.max((dw[(o * cin + i) * cells + k] - dw_ref[(o * cin + i) * 9 + pos]).abs());
            }
        }
    }
    for (a, b) in db.iter().zip(&db_ref) {
        worst = worst.max((a - b).abs());
    }
    worst
}
