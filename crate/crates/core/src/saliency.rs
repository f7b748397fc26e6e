//! Unit-isolation saliency maps.
//!
//! For a feature layer `l` and class `c`, each unit `u` of the layer output
//! `M` is scored by running the network tail (layers after `l`) on a copy of
//! `M` with every other unit zeroed; the pre-softmax score of `c` is the
//! unit's score. The pixel map of a unit is the gradient of that score with
//! respect to the input image, summed over colour channels. Gradients
//! through the layers up to `l` use the ReLU and max-pool gates of the
//! ordinary forward pass on the whole image. The saliency map is the sum of
//! the absolute pixel maps of the top-scoring units, and its ROI is the
//! thresholded support intersected with the units' receptive fields.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::model::{Mode, Model};
use crate::tensor::{Scalar, Tensor};

/// Tail passes evaluated per forward call.
const TAIL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub unit: UnitRef,
    pub score: f64,
}

/// Score of every unit of one layer for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScoreMap {
    pub layer: usize,
    pub class: usize,
    /// `(channels, height, width)` of the layer output.
    pub shape: [usize; 3],
    /// Channel-major like the feature map.
    pub scores: Vec<f64>,
}

impl UnitScoreMap {
    pub fn unit(&self, index: usize) -> UnitRef {
        let [_, h, w] = self.shape;
        UnitRef { layer: self.layer, channel: index / (h * w), row: index / w % h, col: index % w }
    }

    pub fn score(&self, u: &UnitRef) -> f64 {
        let [_, h, w] = self.shape;
        self.scores[(u.channel * h + u.row) * w + u.col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub class: usize,
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Non-negative, row-major `height × width`.
    pub values: Vec<f64>,
    /// Selected units, best first.
    pub units: Vec<ScoredUnit>,
    pub omega: usize,
    /// Union of the selected units' receptive fields in the input image.
    pub footprint: Vec<bool>,
}

impl SaliencyMap {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roi {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl Roi {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Set when the saliency map was zero everywhere.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    /// ROI pixels with a 4-neighbour outside the ROI or on the image edge.
    pub fn border(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !self.contains(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                out[y * w + x] = edge
                    || !self.contains(y - 1, x)
                    || !self.contains(y + 1, x)
                    || !self.contains(y, x - 1)
                    || !self.contains(y, x + 1);
            }
        }
        out
    }
}

fn check_feature_layer<T: Scalar>(model: &Model<T>, layer: usize) -> Result<[usize; 3]> {
    if layer + 1 >= model.num_layers() {
        return invalid(format!("layer {layer} has no network tail (model has {} layers)", model.num_layers()));
    }
    let shape = model.output_shape(layer);
    if shape[1] == 0 {
        return invalid(format!("layer {layer} is not a spatial feature layer"));
    }
    Ok(shape)
}

fn check_image<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<()> {
    if image.rank() != 4 || image.batch() != 1 {
        return Err(Error::ShapeMismatch(format!("expected one image as a batch of 1, got {:?}", image.shape())));
    }
    if image.shape()[1..] != model.config().input {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} does not match model input {:?}",
            image.shape(),
            model.config().input
        )));
    }
    Ok(())
}

fn check_class<T: Scalar>(model: &Model<T>, class: usize) -> Result<usize> {
    let classes = model.output_shape(model.num_layers() - 1)[0];
    if class >= classes {
        return invalid(format!("class {class} out of range for {classes} classes"));
    }
    Ok(classes)
}

/// Output of layers `0..=layer` on the image, in eval mode.
fn feature_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
    Ok(model.forward_range(image, 0, layer + 1, Mode::Eval)?.output().clone())
}

/// Batch of isolated maps: item `j` keeps only unit `idx[j]` of `m`.
fn isolated<T: Scalar>(m: &[T], shape: [usize; 3], idx: &[usize]) -> Tensor<T> {
    let len = m.len();
    let mut data = vec![T::zero(); idx.len() * len];
    for (j, &u) in idx.iter().enumerate() {
        data[j * len + u] = m[u];
    }
    Tensor::from_vec(&[idx.len(), shape[0], shape[1], shape[2]], data).expect("consistent shape")
}

/// Score every unit of layer `layer` for `class` by isolating it and
/// running the network tail.
pub fn unit_scores<T: Scalar>(model: &Model<T>, image: &Tensor<T>, layer: usize, class: usize) -> Result<UnitScoreMap> {
    check_image(model, image)?;
    let shape = check_feature_layer(model, layer)?;
    let classes = check_class(model, class)?;
    let m = feature_map(model, image, layer)?;
    let m = m.data();
    let end = model.num_layers();

    // A zero unit isolates to the all-zero map, whose score is shared.
    let zero = Tensor::<T>::zeros(&[1, shape[0], shape[1], shape[2]]);
    let base = model.forward_range(&zero, layer + 1, end, Mode::Eval)?.output().data()[class].to_f64().unwrap_or(f64::NAN);
    let mut scores = vec![base; m.len()];

    let active: Vec<usize> = (0..m.len()).filter(|&u| m[u] != T::zero()).collect();
    let results: Vec<Result<Vec<(usize, f64)>>> = active
        .par_chunks(TAIL_BATCH)
        .map(|idx| {
            let out = model.forward_range(&isolated(m, shape, idx), layer + 1, end, Mode::Eval)?;
            let s = out.output().data();
            Ok(idx.iter().enumerate().map(|(j, &u)| (u, s[j * classes + class].to_f64().unwrap_or(f64::NAN))).collect())
        })
        .collect();
    for r in results {
        for (u, s) in r? {
            scores[u] = s;
        }
    }
    Ok(UnitScoreMap { layer, class, shape, scores })
}

/// The `n` best units: score descending, then channel, row, column.
pub fn select_top_units(map: &UnitScoreMap, n: usize) -> Result<Vec<ScoredUnit>> {
    if n == 0 {
        return invalid("at least one unit must be selected");
    }
    if n > map.scores.len() {
        return invalid(format!("cannot select {n} of {} units", map.scores.len()));
    }
    let mut idx: Vec<usize> = (0..map.scores.len()).collect();
    // Channel-major indices already order (channel, row, col) lexicographically.
    idx.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a]).then(a.cmp(&b)));
    Ok(idx[..n].iter().map(|&i| ScoredUnit { unit: map.unit(i), score: map.scores[i] }).collect())
}

fn unit_index(shape: [usize; 3], u: &UnitRef) -> Result<usize> {
    let [c, h, w] = shape;
    if u.channel >= c || u.row >= h || u.col >= w {
        return invalid(format!("unit {u:?} outside feature map {shape:?}"));
    }
    Ok((u.channel * h + u.row) * w + u.col)
}

/// Pixel maps (channel-summed input gradients of each unit's isolated
/// class score), one `H × W` row-major map per unit. All units must belong
/// to the same layer.
pub fn backprop_units<T: Scalar>(model: &Model<T>, image: &Tensor<T>, units: &[UnitRef], class: usize) -> Result<Vec<Vec<f64>>> {
    check_image(model, image)?;
    let Some(first) = units.first() else { return Ok(Vec::new()) };
    let layer = first.layer;
    if units.iter().any(|u| u.layer != layer) {
        return invalid("all units must come from the same layer");
    }
    let shape = check_feature_layer(model, layer)?;
    let classes = check_class(model, class)?;
    let idx = units.iter().map(|u| unit_index(shape, u)).collect::<Result<Vec<_>>>()?;
    let n = units.len();
    let end = model.num_layers();

    // Tail: d score / d isolated map, read at each unit.
    let fore = model.forward_range(image, 0, layer + 1, Mode::Eval)?;
    let m = fore.output().data();
    let tail = model.forward_range(&isolated(m, shape, &idx), layer + 1, end, Mode::Eval)?;
    let mut onehot = Tensor::<T>::zeros(&[n, classes]);
    for j in 0..n {
        onehot.data_mut()[j * classes + class] = T::one();
    }
    let dm = model.backward(&tail, &onehot, false, true)?.input.expect("input gradient requested");
    let len = m.len();

    // Forepart: one copy of the whole-image trace per unit.
    let batch_image = image.select(&vec![0; n]);
    let fore_batch = model.forward_range(&batch_image, 0, layer + 1, Mode::Eval)?;
    let mut seed = Tensor::<T>::zeros(fore_batch.output().shape());
    for (j, &u) in idx.iter().enumerate() {
        seed.data_mut()[j * len + u] = dm.data()[j * len + u];
    }
    let dx = model.backward(&fore_batch, &seed, false, true)?.input.expect("input gradient requested");

    let [c, h, w] = model.config().input;
    Ok((0..n)
        .map(|j| {
            let item = dx.item(j);
            (0..h * w).map(|p| (0..c).map(|ch| item[ch * h * w + p].to_f64().unwrap_or(f64::NAN)).sum()).collect()
        })
        .collect())
}

pub fn backprop_unit<T: Scalar>(model: &Model<T>, image: &Tensor<T>, unit: &UnitRef, class: usize) -> Result<Vec<f64>> {
    Ok(backprop_units(model, image, std::slice::from_ref(unit), class)?.remove(0))
}

/// Sum of absolute pixel maps of the top `omega` units of `layer`.
pub fn saliency_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class: usize, layer: usize, omega: usize) -> Result<SaliencyMap> {
    let scores = unit_scores(model, image, layer, class)?;
    let units = select_top_units(&scores, omega)?;
    saliency_from_units(model, image, class, &units)
}

/// Saliency map from an explicit unit selection.
pub fn saliency_from_units<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class: usize, units: &[ScoredUnit]) -> Result<SaliencyMap> {
    let Some(first) = units.first() else { return invalid("no units selected") };
    let refs: Vec<UnitRef> = units.iter().map(|s| s.unit).collect();
    let maps = backprop_units(model, image, &refs, class)?;
    let [_, h, w] = model.config().input;
    let mut values = vec![0.0; h * w];
    for m in &maps {
        for (v, g) in values.iter_mut().zip(m) {
            *v += g.abs();
        }
    }
    let mut footprint = vec![false; h * w];
    for u in &refs {
        for (f, r) in footprint.iter_mut().zip(model.receptive_field(u.layer, u.row, u.col)?) {
            *f |= r;
        }
    }
    Ok(SaliencyMap {
        class,
        layer: first.unit.layer,
        height: h,
        width: w,
        values,
        units: units.to_vec(),
        omega: units.len(),
        footprint,
    })
}

/// Pixels above `tau · max`, limited to the selected units' receptive
/// fields. An all-zero map yields an empty ROI.
pub fn roi(map: &SaliencyMap, tau: f64) -> Result<Roi> {
    if !(0.0..1.0).contains(&tau) {
        return invalid("ROI threshold must lie in [0, 1)");
    }
    let cut = tau * map.max();
    let mask = map.values.iter().zip(&map.footprint).map(|(&v, &f)| f && v > cut).collect::<Vec<_>>();
    let roi = Roi { height: map.height, width: map.width, mask };
    if roi.is_empty() {
        log::warn!("saliency map for class {} is zero everywhere; ROI is empty", map.class);
    }
    Ok(roi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            _ => invalid(format!("unknown image format {s:?} (png or ppm)")),
        }
    }
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub name: String,
    pub score: f64,
}

/// Best `k` classes by score, ties to the lower class id.
pub fn top_classes(scores: &[f64], names: &[&str], k: usize) -> Vec<ClassScore> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|c| ClassScore { class: c, name: names.get(c).map_or_else(|| c.to_string(), |s| s.to_string()), score: scores[c] })
        .collect()
}

/// RGB bytes: red overlay proportional to normalised saliency, ROI border
/// in yellow. `image` is `3 × H × W` in [0, 1].
pub fn overlay(image: &[f32], map: &SaliencyMap, roi: &Roi) -> Result<Vec<u8>> {
    let (h, w) = (map.height, map.width);
    if image.len() != 3 * h * w || roi.mask.len() != h * w {
        return Err(Error::ShapeMismatch("image, map and ROI sizes differ".into()));
    }
    let max = map.max();
    let border = roi.border();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        let a = if max > 0.0 { map.values[p] / max } else { 0.0 };
        let px = if border[p] {
            [1.0, 1.0, 0.0]
        } else {
            let red = [1.0, 0.0, 0.0];
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                *v = (1.0 - a) * image[ch * h * w + p].clamp(0.0, 1.0) as f64 + a * red[ch];
            }
            c
        };
        out.extend(px.iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8], format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Png => {
            image::save_buffer(path, rgb, width as u32, height as u32, image::ColorType::Rgb8)?;
        }
        ImageFormat::Ppm => {
            let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
            bytes.extend_from_slice(rgb);
            fs::write(path, bytes)?;
        }
    }
    Ok(())
}

/// Write the overlay image to `path` and the predictions to a `.tsv` next
/// to it. Returns the sidecar path.
pub fn render(image: &[f32], map: &SaliencyMap, roi: &Roi, top: &[ClassScore], path: impl AsRef<Path>, format: ImageFormat) -> Result<PathBuf> {
    let path = path.as_ref();
    write_rgb(path, map.width, map.height, &overlay(image, map, roi)?, format)?;
    let mut tsv = String::from("rank\tclass_id\tclass_name\tscore\n");
    for (i, c) in top.iter().enumerate() {
        let _ = writeln!(tsv, "{}\t{}\t{}\t{:.6}", i + 1, c.class, c.name, c.score);
    }
    let sidecar = path.with_extension("tsv");
    fs::write(&sidecar, tsv)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelMask;
    use crate::nn::config::{LayerSpec, ModelConfig};

    fn small() -> Model<f64> {
        let cfg = ModelConfig {
            name: "s".into(),
            input: [2, 5, 5],
            layers: vec![
                LayerSpec::MaskedConv { in_ch: 2, out_ch: 3, mask: KernelMask::qh(crate::kernel::Orientation::U) },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxClassifier { in_features: 3, classes: 2 },
            ],
            pattern_seed: 0,
        };
        Model::build(&cfg, 4).unwrap()
    }

    fn image() -> Tensor<f64> {
        Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 13) % 7) as f64 / 7.0 - 0.2)
    }

    #[test]
    fn top_units_tie_break() {
        let map = UnitScoreMap { layer: 0, class: 0, shape: [2, 1, 2], scores: vec![1.0, 3.0, 3.0, 0.5] };
        let top = select_top_units(&map, 3).unwrap();
        let idx: Vec<(usize, usize)> = top.iter().map(|s| (s.unit.channel, s.unit.col)).collect();
        assert_eq!(idx, vec![(0, 1), (1, 0), (0, 0)]);
        assert!(select_top_units(&map, 5).is_err());
        assert!(select_top_units(&map, 0).is_err());
    }

    #[test]
    fn saliency_non_negative_and_inside_footprint() {
        let m = small();
        let s = saliency_map(&m, &image(), 1, 1, 4).unwrap();
        assert!(s.values.iter().all(|&v| v >= 0.0));
        for (v, f) in s.values.iter().zip(&s.footprint) {
            assert!(*f || *v == 0.0);
        }
        let r = roi(&s, 0.0).unwrap();
        assert!(r.mask.iter().zip(&s.footprint).all(|(a, b)| !a || *b));
    }

    #[test]
    fn bad_layer_and_class() {
        let m = small();
        assert!(unit_scores(&m, &image(), 3, 0).is_err());
        assert!(unit_scores(&m, &image(), 2, 0).is_err());
        assert!(unit_scores(&m, &image(), 1, 2).is_err());
    }

    #[test]
    fn zero_map_gives_empty_roi() {
        let s = SaliencyMap {
            class: 0,
            layer: 0,
            height: 2,
            width: 2,
            values: vec![0.0; 4],
            units: vec![],
            omega: 0,
            footprint: vec![true; 4],
        };
        assert!(roi(&s, 0.0).unwrap().is_empty());
    }

    #[test]
    fn render_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let s = SaliencyMap {
            class: 0,
            layer: 0,
            height: 3,
            width: 4,
            values: vec![1.0; 12],
            units: vec![],
            omega: 0,
            footprint: vec![true; 12],
        };
        let r = roi(&s, 0.0).unwrap();
        let img = vec![0.5f32; 36];
        let top = top_classes(&[0.1, 0.9], &["a", "b"], 5);
        assert_eq!(top[0].name, "b");
        for fmt in [ImageFormat::Png, ImageFormat::Ppm] {
            let p = dir.path().join(format!("o.{}", fmt.extension()));
            let side = render(&img, &s, &r, &top, &p, fmt).unwrap();
            assert!(fs::read_to_string(side).unwrap().starts_with("rank\t"));
        }
        let back = image::open(dir.path().join("o.png")).unwrap().to_rgb8();
        assert_eq!((back.width(), back.height()), (4, 3));
        let ppm = fs::read(dir.path().join("o.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
    }
}
