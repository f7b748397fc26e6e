//! Global contrast normalisation and ZCA whitening.
//!
//! GCN works per image: subtract the mean over all pixels and channels and
//! divide by the standard deviation, floored at [`GCN_FLOOR`]. ZCA is fitted
//! in f64 on the training split: with train covariance `C = U Λ Uᵀ` the
//! whitening matrix is `W = U (Λ + ε)^{-1/2} Uᵀ` and a sample maps to
//! `W (x − μ)`.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{ArrayData, Container};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const GCN_FLOOR: f64 = 1e-8;
pub const DEFAULT_ZCA_EPSILON: f64 = 1e-2;

pub fn gcn_item(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = var.sqrt().max(GCN_FLOOR);
    x.iter().map(|v| (v - mean) / scale).collect()
}

pub fn gcn(images: &Tensor<f32>) -> Tensor<f32> {
    let mut out = images.clone();
    for i in 0..images.batch() {
        let x: Vec<f64> = images.item(i).iter().map(|&v| v as f64).collect();
        for (d, v) in out.item_mut(i).iter_mut().zip(gcn_item(&x)) {
            *d = v as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Symmetric `dim × dim`, row-major.
    pub whitening: Vec<f64>,
    pub epsilon: f64,
}

/// Fit on `n` row-major samples of dimension `d`.
pub fn zca_fit_rows(data: &[f64], n: usize, d: usize, epsilon: f64) -> Result<ZcaTransform> {
    if !(epsilon > 0.0) {
        return invalid("ZCA epsilon must be positive");
    }
    if n == 0 || d == 0 || data.len() != n * d {
        return Err(Error::ShapeMismatch(format!("{} values for {n} samples of dimension {d}", data.len())));
    }
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = data.chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();

    let mut cov = vec![0.0; d * d];
    f64::gemm(d, n, d, 1.0 / n as f64, &centered, true, &centered, false, 0.0, &mut cov);

    let c = Mat::<f64>::from_fn(d, d, |i, j| 0.5 * (cov[i * d + j] + cov[j * d + i]));
    let eig = c.selfadjoint_eigendecomposition(Side::Lower);
    let u = eig.u();
    let s = eig.s().column_vector();

    // B = U · diag(1/sqrt(λ + ε)), stored row-major
    let mut u_rows = vec![0.0; d * d];
    let mut scaled = vec![0.0; d * d];
    for j in 0..d {
        let lambda = s.read(j);
        if !lambda.is_finite() {
            return Err(Error::Numerical("eigendecomposition produced a non-finite eigenvalue".into()));
        }
        let f = 1.0 / (lambda.max(0.0) + epsilon).sqrt();
        for i in 0..d {
            let v = u.read(i, j);
            u_rows[i * d + j] = v;
            scaled[i * d + j] = v * f;
        }
    }
    let mut w = vec![0.0; d * d];
    f64::gemm(d, d, d, 1.0, &scaled, false, &u_rows, true, 0.0, &mut w);
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (w[i * d + j] + w[j * d + i]);
            w[i * d + j] = m;
            w[j * d + i] = m;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("whitening matrix is not finite".into()));
    }
    Ok(ZcaTransform { dim: d, mean, whitening: w, epsilon })
}

/// Fit ZCA on a batch of images, each flattened to one sample.
pub fn zca_fit(images: &Tensor<f32>, epsilon: f64) -> Result<ZcaTransform> {
    let data: Vec<f64> = images.data().iter().map(|&v| v as f64).collect();
    zca_fit_rows(&data, images.batch(), images.item_len(), epsilon)
}

impl ZcaTransform {
    /// Whiten `n` row-major samples in f64.
    pub fn apply_rows(&self, data: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if data.len() % d != 0 {
            return Err(Error::ShapeMismatch(format!("{} values are not whole samples of dimension {d}", data.len())));
        }
        let n = data.len() / d;
        let centered: Vec<f64> = data.chunks(d).flat_map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m)).collect();
        let mut out = vec![0.0; n * d];
        f64::gemm(n, d, d, 1.0, &centered, false, &self.whitening, true, 0.0, &mut out);
        Ok(out)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update(self.epsilon.to_le_bytes());
        for v in self.mean.iter().chain(&self.whitening) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn zca_apply(t: &ZcaTransform, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    if images.item_len() != t.dim {
        return Err(Error::ShapeMismatch(format!("ZCA fitted for dimension {}, got {}", t.dim, images.item_len())));
    }
    // Bounded chunks keep the f64 staging buffers small.
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.data().chunks(t.dim * 512) {
        let rows: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
        out.extend(t.apply_rows(&rows)?.into_iter().map(|v| v as f32));
    }
    Tensor::from_vec(images.shape(), out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct PreprocessMeta {
    gcn: bool,
    gcn_floor: f64,
    zca_epsilon: Option<f64>,
}

/// GCN followed by optional ZCA, fitted once on the training split and
/// applied unchanged to every other split.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub gcn: bool,
    pub zca: Option<ZcaTransform>,
}

impl Preprocessor {
    pub fn identity() -> Self {
        Self { gcn: false, zca: None }
    }

    pub fn gcn_only() -> Self {
        Self { gcn: true, zca: None }
    }

    pub fn fit(train: &Dataset, gcn_enabled: bool, zca_epsilon: Option<f64>) -> Result<Self> {
        let base = if gcn_enabled { gcn(&train.images) } else { train.images.clone() };
        let zca = zca_epsilon.map(|eps| zca_fit(&base, eps)).transpose()?;
        Ok(Self { gcn: gcn_enabled, zca })
    }

    pub fn apply(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = if self.gcn { gcn(images) } else { images.clone() };
        match &self.zca {
            Some(z) => zca_apply(z, &x),
            None => Ok(x),
        }
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        ds.map_images(self.apply(&ds.images)?)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.gcn as u8]);
        h.update(GCN_FLOOR.to_le_bytes());
        if let Some(z) = &self.zca {
            h.update(z.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = PreprocessMeta { gcn: self.gcn, gcn_floor: GCN_FLOOR, zca_epsilon: self.zca.as_ref().map(|z| z.epsilon) };
        let mut c = Container::new("preprocess", &self.digest());
        c.push_text("meta", &serde_json::to_string(&meta)?)?;
        if let Some(z) = &self.zca {
            c.push("zca.mean", &[z.dim], ArrayData::F64(z.mean.clone()))?;
            c.push("zca.whitening", &[z.dim, z.dim], ArrayData::F64(z.whitening.clone()))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "preprocess" {
            return Err(Error::Format(format!("expected a preprocess container, got {:?}", c.kind)));
        }
        let meta: PreprocessMeta = serde_json::from_str(&c.text("meta")?)?;
        let zca = match meta.zca_epsilon {
            Some(epsilon) => {
                let mean = c.f64s("zca.mean")?.to_vec();
                Some(ZcaTransform { dim: mean.len(), mean, whitening: c.f64s("zca.whitening")?.to_vec(), epsilon })
            }
            None => None,
        };
        let p = Self { gcn: meta.gcn, zca };
        if p.digest() != c.digest {
            return Err(Error::Format("preprocess container digest does not match its contents".into()));
        }
        Ok(p)
    }
}
