//! Occluded-set generation on a tiny random model.

mod common;

use common::config;
use qhconv::data::{Dataset, Preprocessor};
use qhconv::kernel::{KernelMask, Orientation};
use qhconv::nn::{argmax_rows, predict, LayerSpec, Model};
use qhconv::occlusion::{
    correctly_classified, disc, evaluate_robustness, generate_occlusion_set, Fill, OccludedSet, OcclusionGrid, DEFAULT_RADIUS,
};
use qhconv::Tensor;

const SIDE: usize = 16;

fn model(seed: u64) -> Model<f32> {
    let cfg = config(
        [3, SIDE, SIDE],
        vec![
            LayerSpec::MaskedConv { in_ch: 3, out_ch: 6, mask: KernelMask::qh(Orientation::ALL[0]) },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::MaskedConv { in_ch: 6, out_ch: 6, mask: KernelMask::qh(Orientation::ALL[3]) },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::SoftmaxClassifier { in_features: 6, classes: 3 },
        ],
    );
    Model::build(&cfg, seed).unwrap()
}

fn raw(n: usize) -> Dataset {
    let images = Tensor::from_fn(&[n, 3, SIDE, SIDE], |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
    Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, "test").unwrap()
}

fn grid() -> OcclusionGrid {
    OcclusionGrid { top_k: vec![1, 3], fills: vec![Fill::Black, Fill::Motley], fractions: vec![0.02, 0.05, 0.1], radius: DEFAULT_RADIUS, seed: 12 }
}

fn generate() -> (Vec<OccludedSet>, Dataset, Model<f32>, Model<f32>) {
    let (a, b) = (model(1), model(2));
    let ds = raw(60);
    let sets = generate_occlusion_set(&ds, &Preprocessor::gcn_only(), &[("gen", &a)], &[&a, &b], &grid()).unwrap();
    (sets, ds, a, b)
}

#[test]
fn regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (first, ..) = generate();
    let (second, ..) = generate();
    assert_eq!(first.len(), grid().len());
    for (i, (a, b)) in first.iter().zip(&second).enumerate() {
        let (pa, pb) = (dir.path().join(format!("a{i}.bin")), dir.path().join(format!("b{i}.bin")));
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(std::fs::read(pa.with_extension("manifest.tsv")).unwrap(), std::fs::read(pb.with_extension("manifest.tsv")).unwrap());
    }
}

#[test]
fn smaller_fractions_use_a_prefix_of_the_centres() {
    let (sets, ..) = generate();
    for small in &sets {
        for large in sets.iter().filter(|s| s.spec.top_k == small.spec.top_k && s.spec.fill == small.spec.fill && s.spec.fraction > small.spec.fraction) {
            for (cs, cl) in small.centres.iter().zip(&large.centres) {
                assert!(cs.len() <= cl.len());
                assert_eq!(cs[..], cl[..cs.len()]);
            }
        }
    }
}

#[test]
fn only_disc_pixels_change() {
    let (sets, ds, ..) = generate();
    for set in &sets {
        for (j, &id) in set.image_ids.iter().enumerate() {
            let before = ds.images.item(id);
            let after = set.images.images.item(j);
            let mut allowed = vec![false; SIDE * SIDE];
            for &(y, x) in &set.centres[j] {
                for (dy, dx) in disc(y, x, DEFAULT_RADIUS, SIDE, SIDE) {
                    allowed[dy * SIDE + dx] = true;
                }
            }
            let mut changed = 0;
            for p in 0..SIDE * SIDE {
                if (0..3).any(|c| before[c * SIDE * SIDE + p] != after[c * SIDE * SIDE + p]) {
                    assert!(allowed[p], "{} image {id} pixel {p}", set.spec.label());
                    changed += 1;
                }
            }
            assert!(changed <= set.centres[j].len() * 81);
            for (a, b) in set.centres[j].iter().enumerate() {
                for c in &set.centres[j][a + 1..] {
                    let d2 = (b.0 as i64 - c.0 as i64).pow(2) + (b.1 as i64 - c.1 as i64).pow(2);
                    assert!(d2 >= (DEFAULT_RADIUS * DEFAULT_RADIUS) as i64);
                }
            }
            if set.spec.fill == Fill::Black {
                for &(y, x) in &set.centres[j] {
                    assert!((0..3).all(|c| after[(c * SIDE + y) * SIDE + x] == 0.0));
                }
            }
        }
    }
}

#[test]
fn filtered_images_are_all_classified_correctly() {
    let (sets, ds, a, b) = generate();
    let pre = Preprocessor::gcn_only();
    let processed = pre.apply_dataset(&ds).unwrap();
    let keep = correctly_classified(&[&a, &b], &processed).unwrap();
    assert_eq!(sets[0].image_ids, keep);
    let clean = processed.select(&keep).unwrap();
    for m in [&a, &b] {
        let pred = argmax_rows(&predict(m, &clean.images).unwrap());
        assert_eq!(pred, clean.labels);
    }
    let table = evaluate_robustness(&[("a", &a), ("b", &b)], &pre, &sets).unwrap();
    assert_eq!(table.accuracy.len(), 2);
    assert!(table.accuracy.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(table.to_tsv().lines().count(), 3);
}

#[test]
fn empty_correct_set_is_an_error() {
    let a = model(1);
    let ds = raw(6);
    let pred = argmax_rows(&predict(&a, &Preprocessor::gcn_only().apply(&ds.images).unwrap()).unwrap());
    // relabel every image to a class the model does not predict
    let wrong = Dataset::new(ds.images.clone(), pred.iter().map(|p| (p + 1) % 3).collect(), 3, "test").unwrap();
    assert!(generate_occlusion_set(&wrong, &Preprocessor::gcn_only(), &[("gen", &a)], &[&a], &grid()).is_err());
}
