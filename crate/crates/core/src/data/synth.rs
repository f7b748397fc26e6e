//! Seeded 10-class shapes dataset in CIFAR geometry (3×32×32, values in
//! [0, 1]). Stands in for CIFAR-10 when the real files are not available.
//!
//! Each image is a low-contrast noisy background with one coloured shape of
//! random size, position and colour; the class is the shape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SYNTH_CLASSES: [&str; 10] =
    ["disc", "square", "triangle", "cross", "ring", "hbars", "vbars", "diamond", "xmark", "frame"];

const SIDE: usize = 32;

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let d = (dy * dy + dx * dx).sqrt();
    let t = r * 0.3;
    match class {
        0 => d <= r,
        1 => ay <= r * 0.85 && ax <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r * 0.9 && ax <= (dy + r * 0.9) * 0.6,
        3 => (ay <= t && ax <= r) || (ax <= t && ay <= r),
        4 => d <= r && d >= r * 0.55,
        5 => ay <= r && ax <= r && ((dy + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        6 => ay <= r && ax <= r && ((dx + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        7 => ay + ax <= r,
        8 => ay <= r && ax <= r && ((dy - dx).abs() <= t || (dy + dx).abs() <= t),
        _ => ay <= r && ax <= r && (ay >= r * 0.6 || ax >= r * 0.6),
    }
}

fn colour(g: &mut ChaCha8Rng) -> [f32; 3] {
    // Saturated enough to stand out from the mid-grey background.
    loop {
        let c = [g.gen::<f32>(), g.gen::<f32>(), g.gen::<f32>()];
        let mx = c.iter().cloned().fold(0.0, f32::max);
        let mn = c.iter().cloned().fold(1.0, f32::min);
        if mx - mn > 0.35 || (c[0] - 0.5).abs() > 0.35 {
            return c;
        }
    }
}

fn draw(class: usize, g: &mut ChaCha8Rng, out: &mut [f32]) {
    let plane = SIDE * SIDE;
    let base = [g.gen_range(0.3..0.7f32), g.gen_range(0.3..0.7f32), g.gen_range(0.3..0.7f32)];
    for c in 0..3 {
        for p in 0..plane {
            out[c * plane + p] = (base[c] + g.gen_range(-0.12..0.12f32)).clamp(0.0, 1.0);
        }
    }
    let r: f64 = g.gen_range(6.0..10.0);
    let cy: f64 = g.gen_range(r + 1.0..SIDE as f64 - r - 1.0);
    let cx: f64 = g.gen_range(r + 1.0..SIDE as f64 - r - 1.0);
    let fg = colour(g);
    for y in 0..SIDE {
        for x in 0..SIDE {
            if inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                for c in 0..3 {
                    out[c * plane + y * SIDE + x] = (fg[c] + g.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// `n` images with labels cycling through the classes, reproducible from `seed`.
pub fn shapes_dataset(n: usize, seed: u64, split: &str) -> Result<Dataset> {
    if n == 0 {
        return invalid("synthetic dataset needs at least one image");
    }
    let len = 3 * SIDE * SIDE;
    let mut data = vec![0.0f32; n * len];
    let mut labels = Vec::with_capacity(n);
    for (i, item) in data.chunks_mut(len).enumerate() {
        let class = i % SYNTH_CLASSES.len();
        draw(class, &mut rng::stream(seed, i as u64), item);
        labels.push(class);
    }
    let images = Tensor::from_vec(&[n, 3, SIDE, SIDE], data)?;
    Dataset::new(images, labels, SYNTH_CLASSES.len(), split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = shapes_dataset(40, 3, "train").unwrap();
        assert_eq!(a, shapes_dataset(40, 3, "train").unwrap());
        assert_ne!(a.images, shapes_dataset(40, 4, "train").unwrap().images);
        assert_eq!(a.histogram(), vec![4; 10]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_class_draws_pixels() {
        for class in 0..10 {
            let n = (0..64).flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| {
                inside(class, (y as f64 - 32.0) / 4.0, (x as f64 - 32.0) / 4.0, 8.0)
            });
            assert!(n.count() > 100, "class {class}");
        }
    }
}
