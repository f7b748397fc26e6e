//! Per-layer forward and backward kernels.
//!
//! Convolutions use an im2col formulation restricted to the active mask
//! offsets: the column matrix has `in_ch · |cells|` rows, so a 7-cell mask
//! does exactly 7/9 of the multiply-accumulates of a full 3×3 window.
//! Weights are packed as `out_ch × (in_ch · |cells|)`, row-major, with the
//! cell index varying fastest.
//!
//! Batch items are split into one contiguous chunk per rayon worker.
//! Per-chunk weight gradients are reduced in chunk order, so results are
//! reproducible for a fixed worker count.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::kernel::Offset;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn item_chunks(n: usize) -> Vec<Range<usize>> {
    let k = rayon::current_num_threads().clamp(1, n.max(1));
    let size = n.div_ceil(k).max(1);
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub offsets: Vec<Offset>,
    /// `out_ch × in_ch × |offsets|`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, offsets: Vec<Offset>) -> Self {
        let k = in_ch * offsets.len();
        Self { in_ch, out_ch, offsets, weight: vec![T::zero(); out_ch * k], bias: vec![T::zero(); out_ch] }
    }

    pub fn cells(&self) -> usize {
        self.offsets.len()
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.offsets.len()
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let hw = h * w;
        let nc = self.offsets.len();
        for ic in 0..self.in_ch {
            let plane = &x[ic * hw..(ic + 1) * hw];
            for (ci, &(dy, dx)) in self.offsets.iter().enumerate() {
                let row = &mut cols[(ic * nc + ci) * hw..(ic * nc + ci + 1) * hw];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as i64 + dy as i64;
                    if sy < 0 || sy >= h as i64 || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let sx0 = (x0 as i64 + dx as i64) as usize;
                    dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[T], h: usize, w: usize, dx_out: &mut [T]) {
        let hw = h * w;
        let nc = self.offsets.len();
        for ic in 0..self.in_ch {
            let plane = &mut dx_out[ic * hw..(ic + 1) * hw];
            for (ci, &(dy, dx)) in self.offsets.iter().enumerate() {
                let row = &cols[(ic * nc + ci) * hw..(ic * nc + ci + 1) * hw];
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as i64 + dy as i64;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let sx0 = (x0 as i64 + dx as i64) as usize;
                    let dst = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4().expect("conv input is rank 4");
        debug_assert_eq!(c, self.in_ch);
        let hw = h * w;
        let k = self.col_rows();
        let mut out = Tensor::zeros(&[n, self.out_ch, h, w]);
        let per_item = self.out_ch * hw;
        let chunks = item_chunks(n);
        let chunk_len = chunks.first().map_or(1, |r| r.len()) * per_item;
        out.data_mut().par_chunks_mut(chunk_len.max(1)).zip(chunks.into_par_iter()).for_each(|(dst, items)| {
            let mut cols = vec![T::zero(); k * hw];
            for (j, i) in items.enumerate() {
                self.im2col(x.item(i), h, w, &mut cols);
                let o = &mut dst[j * per_item..(j + 1) * per_item];
                for (oc, b) in self.bias.iter().enumerate() {
                    o[oc * hw..(oc + 1) * hw].fill(*b);
                }
                T::gemm(self.out_ch, k, hw, T::one(), &self.weight, false, &cols, false, T::one(), o);
            }
        });
        out
    }

    /// Returns `(d input, d weight, d bias)`. Input gradients are skipped
    /// when `need_input` is false.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, need_params: bool, need_input: bool) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
        let (n, _, h, w) = x.dims4().expect("conv input is rank 4");
        let hw = h * w;
        let k = self.col_rows();
        let mut dx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
        let chunks = item_chunks(n);
        let in_item = self.in_ch * hw;
        let chunk_len = chunks.first().map_or(1, |r| r.len()) * in_item;

        let work = |items: Range<usize>, dst: Option<&mut [T]>| {
            let mut cols = vec![T::zero(); k * hw];
            let mut dw = if need_params { vec![T::zero(); self.weight.len()] } else { Vec::new() };
            let mut db = if need_params { vec![T::zero(); self.out_ch] } else { Vec::new() };
            let mut dcols = if dst.is_some() { vec![T::zero(); k * hw] } else { Vec::new() };
            let mut dst = dst;
            for (j, i) in items.enumerate() {
                let g = dy.item(i);
                if need_params {
                    self.im2col(x.item(i), h, w, &mut cols);
                    T::gemm(self.out_ch, hw, k, T::one(), g, false, &cols, true, T::one(), &mut dw);
                    for (oc, b) in db.iter_mut().enumerate() {
                        *b += g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                if let Some(d) = dst.as_deref_mut() {
                    T::gemm(k, self.out_ch, hw, T::one(), &self.weight, true, g, false, T::zero(), &mut dcols);
                    self.col2im_add(&dcols, h, w, &mut d[j * in_item..(j + 1) * in_item]);
                }
            }
            (dw, db)
        };

        let partial: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
            Some(t) => t
                .data_mut()
                .par_chunks_mut(chunk_len.max(1))
                .zip(chunks.into_par_iter())
                .map(|(dst, items)| work(items, Some(dst)))
                .collect(),
            None => chunks.into_par_iter().map(|items| work(items, None)).collect(),
        };
        let mut dw = vec![T::zero(); if need_params { self.weight.len() } else { 0 }];
        let mut db = vec![T::zero(); if need_params { self.out_ch } else { 0 }];
        for (pw, pb) in partial {
            add_into(&mut dw, &pw);
            add_into(&mut db, &pb);
        }
        (dx, dw, db)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.out_ch * self.in_ch * self.offsets.len()) as u64
    }
}

/// Output columns `x` for which `x + dx` lies inside `[0, w)`.
fn valid_range(w: usize, dx: i32) -> (usize, usize) {
    let lo = (-(dx as i64)).max(0) as usize;
    let hi = (w as i64 - dx as i64).clamp(0, w as i64) as usize;
    (lo.min(w), hi)
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out_features × in_features`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let mut out = Tensor::from_fn(&[n, self.out_features], |i| self.bias[i % self.out_features]);
        T::gemm(n, self.in_features, self.out_features, T::one(), x.data(), false, &self.weight, true, T::one(), out.data_mut());
        out
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, need_params: bool) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let n = x.batch();
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(n, self.out_features, self.in_features, T::one(), dy.data(), false, &self.weight, false, T::zero(), dx.data_mut());
        if !need_params {
            return (dx, Vec::new(), Vec::new());
        }
        let mut dw = vec![T::zero(); self.weight.len()];
        T::gemm(self.out_features, n, self.in_features, T::one(), dy.data(), true, x.data(), false, T::zero(), &mut dw);
        let mut db = vec![T::zero(); self.out_features];
        for row in dy.data().chunks(self.out_features) {
            add_into(&mut db, row);
        }
        (dx, dw, db)
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient gated on the layer's output being positive.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Max-pool without padding; returns the output and, per output element,
/// the flat index of its (first) maximum within the input item.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4().expect("pool input is rank 4");
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let per_out = c * oh * ow;
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        let am = &mut arg[i * per_out..(i + 1) * per_out];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = ch * oh * ow + oy * ow + ox;
                    dst[o] = best;
                    am[o] = bi as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let per_out = dy.item_len();
    for i in 0..dy.batch() {
        let g = dy.item(i);
        let d = dx.item_mut(i);
        for (o, &a) in argmax[i * per_out..(i + 1) * per_out].iter().enumerate() {
            d[a as usize] += g[o];
        }
    }
    dx
}

/// Inverted dropout mask: kept entries are `1 / (1 - rate)`, dropped are 0.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    let mut g = rng::seeded(seed);
    (0..len).map(|_| if g.gen::<f64>() < keep { scale } else { T::zero() }).collect()
}

pub fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = x.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("pool input is rank 4");
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data).expect("pooled shape")
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::lit(hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}
