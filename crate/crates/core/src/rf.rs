//! Monte Carlo study of receptive-field coverage under random QH pattern
//! sequences.
//!
//! Each configuration is a stack of `depth` QH masks with independently drawn
//! orientations. Its footprint, rendered on the tight `(2·depth+1)²` grid,
//! is a binary coverage matrix; the mean over all configurations is the
//! average coverage, and each configuration's distance to that mean is the
//! squared Frobenius norm of the difference divided by the grid area.
//!
//! The reduction is carried out in integers (coverage counts and scaled
//! squared distances), so statistics are bit-identical regardless of the
//! order or thread in which configurations were evaluated.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kernel::{compose_rf, sample_pattern_sequence};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width` entries in `[0, 1]`.
    pub values: Vec<f64>,
}

impl CoverageMatrix {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} coverage matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("coverage values must lie in [0, 1]");
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, values: vec![value; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Grayscale PNG, each cell drawn as a `scale × scale` block with
    /// intensity `round(255 · value)`.
    pub fn write_png(&self, path: impl AsRef<Path>, scale: u32) -> Result<()> {
        let scale = scale.max(1);
        let img = image::GrayImage::from_fn(self.width as u32 * scale, self.height as u32 * scale, |x, y| {
            let v = self.get((y / scale) as usize, (x / scale) as usize);
            image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        img.save(path)?;
        Ok(())
    }
}

/// `‖mean − single‖²_F / (W·H)`.
pub fn rf_distance(mean: &CoverageMatrix, single: &CoverageMatrix) -> Result<f64> {
    if mean.width != single.width || mean.height != single.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            mean.width, mean.height, single.width, single.height
        )));
    }
    let sq: f64 = mean.values.iter().zip(&single.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (mean.width * mean.height) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfStats {
    pub depth: usize,
    pub num_configs: usize,
    pub mean_d: f64,
    /// Population variance over the configurations.
    pub var_d: f64,
    pub mean_coverage: CoverageMatrix,
    pub seed: u64,
    /// Coverage of the first configuration, kept for side-by-side figures.
    pub example: CoverageMatrix,
}

impl RfStats {
    pub const HEADER: &'static str = "depth\tK\tmean_d\tvar_d\tseed";

    /// Tab-separated summary record: depth, K, mean_d, var_d, seed.
    pub fn to_record(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6e}\t{}", self.depth, self.num_configs, self.mean_d, self.var_d, self.seed)
    }
}

/// Seed of the `k`-th configuration of a simulation seeded with `seed`.
pub fn config_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, k as u64)
}

/// Binary footprint of one pattern configuration on the `(2·depth+1)²` grid.
pub fn config_coverage(depth: usize, config_seed: u64) -> Result<Vec<bool>> {
    let seq = sample_pattern_sequence(depth, config_seed)?;
    let fp = compose_rf(&seq.masks())?;
    Ok(fp.covered().to_vec())
}

pub fn simulate_rf(depth: usize, num_configs: usize, seed: u64) -> Result<RfStats> {
    simulate_rf_with_order(depth, num_configs, seed, None)
}

/// Same as [`simulate_rf`] but reduces configurations in the given order.
/// Exposed so callers can check order invariance.
pub fn simulate_rf_with_order(depth: usize, num_configs: usize, seed: u64, order: Option<&[usize]>) -> Result<RfStats> {
    if depth < 1 {
        return invalid("depth must be at least 1");
    }
    if num_configs < 2 {
        return invalid("at least two configurations are required");
    }
    let extent = 2 * depth + 1;
    let cells = extent * extent;

    let covers: Vec<Vec<bool>> = (0..num_configs)
        .into_par_iter()
        .map(|k| config_coverage(depth, config_seed(seed, k)))
        .collect::<Result<_>>()?;

    let default_order: Vec<usize>;
    let order = match order {
        Some(o) => {
            let mut check = o.to_vec();
            check.sort_unstable();
            if check != (0..num_configs).collect::<Vec<_>>() {
                return invalid("order must be a permutation of the configurations");
            }
            o
        }
        None => {
            default_order = (0..num_configs).collect();
            &default_order
        }
    };

    let mut counts = vec![0u64; cells];
    for &k in order {
        for (c, &hit) in counts.iter_mut().zip(&covers[k]) {
            *c += hit as u64;
        }
    }

    // With K configurations, K·mean - K·single = count - K·hit is an integer,
    // so K²·cells·d_k is an integer as well.
    let kk = num_configs as i128;
    let mut sum_d: u128 = 0;
    let mut sum_d2: u128 = 0;
    for &k in order {
        let scaled: u128 = counts
            .iter()
            .zip(&covers[k])
            .map(|(&c, &hit)| {
                let diff = c as i128 - kk * hit as i128;
                (diff * diff) as u128
            })
            .sum();
        sum_d += scaled;
        sum_d2 += scaled * scaled;
    }
    let denom = (kk * kk) as f64 * cells as f64;
    let k = num_configs as f64;
    let mean_d = sum_d as f64 / denom / k;
    let var_num = (kk as u128) * sum_d2 - sum_d * sum_d;
    let var_d = var_num as f64 / (denom * denom) / (k * k);

    let mean_values = counts.iter().map(|&c| c as f64 / k).collect();
    let example = covers[0].iter().map(|&b| b as u8 as f64).collect();
    Ok(RfStats {
        depth,
        num_configs,
        mean_d,
        var_d,
        mean_coverage: CoverageMatrix { width: extent, height: extent, values: mean_values },
        seed,
        example: CoverageMatrix { width: extent, height: extent, values: example },
    })
}

/// Write the mean coverage heatmap of `stats` as a grayscale PNG.
pub fn emit_coverage_image(stats: &RfStats, path: impl AsRef<Path>) -> Result<()> {
    stats.mean_coverage.write_png(path, 1)
}
