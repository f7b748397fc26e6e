//! Targeted occlusion sets built from saliency maps, and robustness tables.
//!
//! For every image that all participating models classify correctly, the
//! saliency map of the true class at the generator's last max-pool layer is
//! built from its Top-k units. The most salient ROI pixels, thinned so that
//! centres are at least one radius apart, receive filled discs of radius
//! `r`. Occlusion happens on raw [0, 1] pixels; models see the result after
//! the usual preprocessing.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{ArrayData, Container};
use crate::data::{Dataset, Preprocessor};
use crate::error::{invalid, Error, Result};
use crate::nn::model::{softmax, Model};
use crate::nn::train::{argmax_rows, predict};
use crate::rng::{self, derive_seed};
use crate::saliency::{roi, saliency_map, Roi, SaliencyMap};
use crate::tensor::Tensor;

pub const DEFAULT_RADIUS: usize = 5;
pub const FRACTION_RANGE: (f64, f64) = (0.01, 0.10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Black,
    Motley,
}

impl Fill {
    pub fn short(self) -> &'static str {
        match self {
            Fill::Black => "Bla.",
            Fill::Motley => "Mot.",
        }
    }
}

impl std::str::FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_end_matches('.') {
            "black" | "bla" => Ok(Fill::Black),
            "motley" | "mot" => Ok(Fill::Motley),
            _ => invalid(format!("unknown fill {s:?} (black or motley)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub generator: String,
    pub top_k: usize,
    pub fraction: f64,
    pub radius: usize,
    pub fill: Fill,
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = FRACTION_RANGE;
        if !(lo..=hi).contains(&self.fraction) {
            return invalid(format!("pixel fraction {} outside [{lo}, {hi}]", self.fraction));
        }
        if self.radius == 0 {
            return invalid("occluder radius must be at least 1");
        }
        if self.top_k == 0 {
            return invalid("top_k must be at least 1");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// E.g. `QH-A-mini/Top5/Bla./5%`.
    pub fn label(&self) -> String {
        format!("{}/Top{}/{}/{}%", self.generator, self.top_k, self.fill.short(), fmt_percent(self.fraction))
    }
}

fn fmt_percent(f: f64) -> String {
    let p = f * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// Cartesian grid of occlusion conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionGrid {
    pub top_k: Vec<usize>,
    pub fills: Vec<Fill>,
    pub fractions: Vec<f64>,
    pub radius: usize,
    pub seed: u64,
}

impl OcclusionGrid {
    /// Top1/Top5 × black/motley × 1%..10%.
    pub fn full(seed: u64) -> Self {
        Self {
            top_k: vec![1, 5],
            fills: vec![Fill::Black, Fill::Motley],
            fractions: (1..=10).map(|i| i as f64 / 100.0).collect(),
            radius: DEFAULT_RADIUS,
            seed,
        }
    }

    pub fn specs(&self, generator: &str) -> Vec<OcclusionSpec> {
        let mut out = Vec::new();
        for &top_k in &self.top_k {
            for &fill in &self.fills {
                for &fraction in &self.fractions {
                    out.push(OcclusionSpec { generator: generator.into(), top_k, fraction, radius: self.radius, fill, seed: self.seed });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.top_k.len() * self.fills.len() * self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Centres for the discs: the `ceil(fraction · |ROI|)` most salient ROI
/// pixels (ties by row, then column), greedily thinned so that any two
/// accepted centres are at least `radius` apart. Because both steps are
/// prefix-stable, a smaller fraction yields a prefix of a larger one.
pub fn select_occlusion_pixels(map: &SaliencyMap, roi: &Roi, fraction: f64, radius: usize) -> Result<Vec<(usize, usize)>> {
    if roi.is_empty() {
        return invalid("cannot place occluders in an empty ROI");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid("fraction must lie in (0, 1]");
    }
    let w = map.width;
    let mut px: Vec<usize> = (0..roi.mask.len()).filter(|&p| roi.mask[p]).collect();
    px.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let take = (fraction * px.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    let r2 = (radius * radius) as i64;
    let mut centres: Vec<(usize, usize)> = Vec::new();
    for &p in &px[..take.min(px.len())] {
        let (y, x) = (p / w, p % w);
        let far = centres.iter().all(|&(cy, cx)| {
            let (dy, dx) = (cy as i64 - y as i64, cx as i64 - x as i64);
            dy * dy + dx * dx >= r2
        });
        if far {
            centres.push((y, x));
        }
    }
    Ok(centres)
}

/// Pixels of a disc of the given radius around `(cy, cx)`, clipped to the image.
pub fn disc(cy: usize, cx: usize, radius: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx > r * r {
                continue;
            }
            let (y, x) = (cy as i64 + dy, cx as i64 + dx);
            if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// One colour per occluder. Motley colours are uniform 24-bit RGB drawn
/// from a stream keyed by the seed and the image id.
pub fn occluder_colours(fill: Fill, seed: u64, image_id: usize, count: usize) -> Vec<[u8; 3]> {
    match fill {
        Fill::Black => vec![[0, 0, 0]; count],
        Fill::Motley => {
            let mut g = rng::stream(seed, image_id as u64);
            (0..count)
                .map(|_| {
                    let v: u32 = g.gen_range(0..1 << 24);
                    [(v >> 16) as u8, (v >> 8) as u8, v as u8]
                })
                .collect()
        }
    }
}

/// Paint discs onto a `3 × H × W` image in [0, 1].
pub fn apply_occluders(image: &mut [f32], height: usize, width: usize, centres: &[(usize, usize)], colours: &[[u8; 3]], radius: usize) -> Result<()> {
    if image.len() != 3 * height * width {
        return Err(Error::ShapeMismatch(format!("{} values for a 3x{height}x{width} image", image.len())));
    }
    if centres.len() != colours.len() {
        return invalid("one colour per occluder is required");
    }
    for (&(cy, cx), col) in centres.iter().zip(colours) {
        if cy >= height || cx >= width {
            return invalid(format!("occluder centre ({cy}, {cx}) outside the image"));
        }
        for (y, x) in disc(cy, cx, radius, height, width) {
            for (ch, &c) in col.iter().enumerate() {
                image[(ch * height + y) * width + x] = c as f32 / 255.0;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccludedSet {
    pub spec: OcclusionSpec,
    /// Indices into the base dataset.
    pub image_ids: Vec<usize>,
    pub centres: Vec<Vec<(usize, usize)>>,
    pub colours: Vec<Vec<[u8; 3]>>,
    /// Occluded raw images with their labels.
    pub images: Dataset,
}

impl OccludedSet {
    pub fn manifest(&self) -> String {
        let mut s = format!("# spec\t{}\n# digest\t{}\nimage_id\tcentres\tcolours\n", serde_json::to_string(&self.spec).unwrap_or_default(), self.spec.digest());
        for ((id, cs), cols) in self.image_ids.iter().zip(&self.centres).zip(&self.colours) {
            let c: Vec<String> = cs.iter().map(|(y, x)| format!("{y},{x}")).collect();
            let k: Vec<String> = cols.iter().map(hex::encode).collect();
            let _ = writeln!(s, "{id}\t{}\t{}", c.join(";"), k.join(";"));
        }
        s
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.images.to_container(&self.spec.digest())?;
        c.push_text("occlusion.spec", &serde_json::to_string(&self.spec)?)?;
        c.push_text("occlusion.manifest", &self.manifest())?;
        c.push("occlusion.image_ids", &[self.image_ids.len()], ArrayData::U64(self.image_ids.iter().map(|&i| i as u64).collect()))?;
        Ok(c)
    }

    /// Dataset container plus a `.manifest.tsv` alongside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container()?.save(path)?;
        std::fs::write(path.with_extension("manifest.tsv"), self.manifest())?;
        Ok(())
    }
}

/// Indices of images every model classifies correctly.
pub fn correctly_classified(models: &[&Model<f32>], ds: &Dataset) -> Result<Vec<usize>> {
    let mut ok = vec![true; ds.len()];
    for m in models {
        let pred = argmax_rows(&predict(m, &ds.images)?);
        for (o, (p, l)) in ok.iter_mut().zip(pred.iter().zip(&ds.labels)) {
            *o &= p == l;
        }
    }
    Ok((0..ds.len()).filter(|&i| ok[i]).collect())
}

/// Saliency map and ROI of the true class at the generator's last max-pool.
pub fn generator_roi(generator: &Model<f32>, image: &Tensor<f32>, class: usize, top_k: usize) -> Result<(SaliencyMap, Roi)> {
    let layer = generator
        .config()
        .last_maxpool()
        .ok_or_else(|| Error::InvalidArgument(format!("model {} has no max-pool layer", generator.config().name)))?;
    let map = saliency_map(generator, image, class, layer, top_k)?;
    let r = roi(&map, 0.0)?;
    Ok((map, r))
}

/// Build one occluded set per (generator, top_k, fill, fraction) over the
/// images that every model in `filter_models` classifies correctly.
/// `raw` holds unprocessed pixels; `pre` is the models' preprocessing.
pub fn generate_occlusion_set(
    raw: &Dataset,
    pre: &Preprocessor,
    generators: &[(&str, &Model<f32>)],
    filter_models: &[&Model<f32>],
    grid: &OcclusionGrid,
) -> Result<Vec<OccludedSet>> {
    let processed = pre.apply_dataset(raw)?;
    let keep = correctly_classified(filter_models, &processed)?;
    if keep.is_empty() {
        return Err(Error::InvalidArgument("no image is classified correctly by every model".into()));
    }
    let [c, h, w] = raw.image_shape();
    let mut sets = Vec::new();
    for (name, generator) in generators {
        let specs = grid.specs(name);
        for s in &specs {
            s.validate()?;
        }
        // Saliency per (image, top_k) is shared by every fill and fraction.
        let mut rows: Vec<Vec<(Vec<(usize, usize)>, Vec<[u8; 3]>, Vec<f32>)>> = vec![Vec::new(); specs.len()];
        for &id in &keep {
            let x = processed.images.select(&[id]);
            for &k in &grid.top_k {
                let (map, r) = generator_roi(generator, &x, raw.labels[id], k)?;
                for (si, s) in specs.iter().enumerate().filter(|(_, s)| s.top_k == k) {
                    let centres = if r.is_empty() { Vec::new() } else { select_occlusion_pixels(&map, &r, s.fraction, s.radius)? };
                    let colours = occluder_colours(s.fill, derive_seed(s.seed, k as u64), id, centres.len());
                    let mut img = raw.images.item(id).to_vec();
                    apply_occluders(&mut img, h, w, &centres, &colours, s.radius)?;
                    rows[si].push((centres, colours, img));
                }
            }
        }
        for (s, r) in specs.into_iter().zip(rows) {
            let mut data = Vec::with_capacity(r.len() * c * h * w);
            let mut centres = Vec::new();
            let mut colours = Vec::new();
            for (cs, cols, img) in r {
                centres.push(cs);
                colours.push(cols);
                data.extend(img);
            }
            let images = Tensor::from_vec(&[keep.len(), c, h, w], data)?;
            let labels = keep.iter().map(|&i| raw.labels[i]).collect();
            let images = Dataset::new(images, labels, raw.class_count, format!("occluded:{}", s.label()))?;
            sets.push(OccludedSet { spec: s, image_ids: keep.clone(), centres, colours, images });
        }
    }
    Ok(sets)
}

/// Accuracy of every model on every set.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    pub models: Vec<String>,
    pub specs: Vec<OcclusionSpec>,
    /// `accuracy[m][s]` in [0, 1].
    pub accuracy: Vec<Vec<f64>>,
}

pub fn evaluate_robustness(models: &[(&str, &Model<f32>)], pre: &Preprocessor, sets: &[OccludedSet]) -> Result<RobustnessTable> {
    let processed = sets.iter().map(|s| pre.apply_dataset(&s.images)).collect::<Result<Vec<_>>>()?;
    let mut accuracy = Vec::new();
    for (_, m) in models {
        let mut row = Vec::new();
        for ds in &processed {
            let pred = argmax_rows(&predict(m, &ds.images)?);
            let right = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
            row.push(right as f64 / ds.len() as f64);
        }
        accuracy.push(row);
    }
    Ok(RobustnessTable {
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        specs: sets.iter().map(|s| s.spec.clone()).collect(),
        accuracy,
    })
}

impl RobustnessTable {
    pub fn average(&self, model: usize) -> f64 {
        let row = &self.accuracy[model];
        row.iter().sum::<f64>() / row.len().max(1) as f64
    }

    /// Column groups `generator/TopK/fill` in first-seen order.
    fn groups(&self) -> Vec<(String, usize, Fill)> {
        let mut out: Vec<(String, usize, Fill)> = Vec::new();
        for s in &self.specs {
            let key = (s.generator.clone(), s.top_k, s.fill);
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    /// One row per evaluated model, one column per generator × TopK × fill
    /// (accuracy in percent averaged over fractions), then the overall average.
    pub fn to_tsv(&self) -> String {
        let groups = self.groups();
        let mut s = String::from("model");
        for (g, k, f) in &groups {
            let _ = write!(s, "\t{g}/Top{k}/{}", f.short());
        }
        s.push_str("\taverage\n");
        for (mi, name) in self.models.iter().enumerate() {
            s.push_str(name);
            for (g, k, f) in &groups {
                let vals: Vec<f64> = self
                    .specs
                    .iter()
                    .zip(&self.accuracy[mi])
                    .filter(|(sp, _)| &sp.generator == g && sp.top_k == *k && sp.fill == *f)
                    .map(|(_, &a)| a)
                    .collect();
                let _ = write!(s, "\t{:.1}", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64);
            }
            let _ = writeln!(s, "\t{:.1}", 100.0 * self.average(mi));
        }
        s
    }

    /// Long form: one line per (model, set).
    pub fn to_long_tsv(&self) -> String {
        let mut s = String::from("model\tgenerator\ttop_k\tfill\tfraction\taccuracy\n");
        for (mi, name) in self.models.iter().enumerate() {
            for (sp, a) in self.specs.iter().zip(&self.accuracy[mi]) {
                let _ = writeln!(s, "{name}\t{}\t{}\t{}\t{}\t{:.4}", sp.generator, sp.top_k, sp.fill.short(), sp.fraction, a);
            }
        }
        s
    }
}

/// Softmax probability of each image's label.
pub fn true_class_probability(model: &Model<f32>, ds: &Dataset) -> Result<Vec<f64>> {
    let p = softmax(&predict(model, &ds.images)?);
    let c = p.shape()[1];
    Ok(ds.labels.iter().enumerate().map(|(i, &l)| p.data()[i * c + l] as f64).collect())
}
