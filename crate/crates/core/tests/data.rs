//! Preprocessing oracles, sampling and the CIFAR reader.

mod common;

use common::{random_vec, rel_err};
use proptest::prelude::*;
use qhconv::data::{
    cifar10_test_file, gcn, gcn_item, load_cifar_binary, subsample, write_cifar_binary, zca_apply, zca_fit, zca_fit_rows, CifarFlavor,
    Dataset, Preprocessor, GCN_FLOOR,
};
use qhconv::Tensor;

/// Two-pass mean and population deviation, written out longhand.
fn two_pass(x: &[f64]) -> Vec<f64> {
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= x.len() as f64;
    let mut ss = 0.0;
    for v in x {
        ss += (v - mean) * (v - mean);
    }
    let sd = (ss / x.len() as f64).sqrt();
    x.iter().map(|v| (v - mean) / sd.max(GCN_FLOOR)).collect()
}

proptest! {
    #[test]
    fn gcn_matches_two_pass_and_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let once = gcn_item(&x);
        for (a, b) in once.iter().zip(two_pass(&x)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            let mean = once.iter().sum::<f64>() / once.len() as f64;
            let var = once.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / once.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
            for (a, b) in gcn_item(&once).iter().zip(&once) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn gcn_constant_image_is_zero() {
    // rounding in the mean leaves at most ulp/GCN_FLOOR
    assert!(gcn_item(&[0.4; 12]).iter().all(|v| v.abs() < 1e-6));
    let t = Tensor::from_vec(&[2, 1, 2, 2], vec![0.3f32; 8]).unwrap();
    assert!(gcn(&t).data().iter().all(|v| v.abs() < 1e-6));
}

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    // Correlated columns so the whitening has work to do.
    let base = random_vec(n * d, seed);
    base.chunks(d).flat_map(|r| (0..d).map(move |j| r[j] + 0.5 * r[(j + 1) % d])).collect()
}

#[test]
fn zca_is_affine_and_linear_in_the_centred_input() {
    let (n, d) = (60, 8);
    let t = zca_fit_rows(&random_rows(n, d, 1), n, d, 1e-2).unwrap();
    let a = random_vec(d, 2);
    let b = random_vec(d, 3);
    let (alpha, beta) = (0.7, -1.9);
    // f(x) = W (x - μ) so f(αa + βb) = αf(a) + βf(b) + (α + β - 1)(-Wμ)
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
    let fa = t.apply_rows(&a).unwrap();
    let fb = t.apply_rows(&b).unwrap();
    let f0 = t.apply_rows(&vec![0.0; d]).unwrap();
    let fm = t.apply_rows(&mix).unwrap();
    for i in 0..d {
        let expect = alpha * fa[i] + beta * fb[i] + (1.0 - alpha - beta) * f0[i];
        assert!((fm[i] - expect).abs() < 1e-10);
    }
    // mean maps to zero
    assert!(t.apply_rows(&t.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn whitening_is_symmetric() {
    let (n, d) = (200, 24);
    let t = zca_fit_rows(&random_rows(n, d, 5), n, d, 1e-3).unwrap();
    for i in 0..d {
        for j in 0..d {
            assert!((t.whitening[i * d + j] - t.whitening[j * d + i]).abs() < 1e-8);
        }
    }
}

#[test]
fn whitened_covariance_is_near_identity_when_well_sampled() {
    let (n, d) = (4000, 6);
    let eps = 1e-6;
    let t = zca_fit_rows(&random_rows(n, d, 9), n, d, eps).unwrap();
    let out = t.apply_rows(&random_rows(n, d, 9)).unwrap();
    for i in 0..d {
        for j in 0..d {
            let c: f64 = out.chunks(d).map(|r| r[i] * r[j]).sum::<f64>() / n as f64;
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-3, "({i},{j}) = {c}");
        }
    }
}

#[test]
fn zca_rejects_bad_input() {
    assert!(zca_fit_rows(&[1.0; 6], 2, 3, 0.0).is_err());
    assert!(zca_fit_rows(&[1.0; 5], 2, 3, 0.1).is_err());
    let t = zca_fit(&Tensor::from_fn(&[4, 1, 2, 2], |i| i as f32), 0.1).unwrap();
    assert!(zca_apply(&t, &Tensor::zeros(&[1, 1, 3, 3])).is_err());
}

fn labelled(n: usize, classes: usize) -> Dataset {
    let images = Tensor::from_fn(&[n, 1, 2, 2], |i| i as f32);
    Dataset::new(images, (0..n).map(|i| (i * 7) % classes).collect(), classes, "train").unwrap()
}

#[test]
fn subsample_is_balanced_and_seeded() {
    let ds = labelled(300, 10);
    let s = subsample(&ds, 100, 4).unwrap();
    assert_eq!(s.histogram(), vec![10; 10]);
    assert_eq!(s, subsample(&ds, 100, 4).unwrap());
    assert_ne!(s.labels, subsample(&ds, 100, 5).unwrap().labels);
    assert_eq!(subsample(&ds, 105, 4).unwrap().len(), 100);
    assert!(subsample(&ds, 301, 4).is_err());
    assert!(subsample(&ds, 9, 4).is_err());
}

#[test]
fn preprocessor_fits_on_train_and_round_trips() {
    let train = labelled(40, 4).map_images(Tensor::from_fn(&[40, 1, 2, 2], |i| ((i * 37) % 11) as f32 / 11.0)).unwrap();
    let pre = Preprocessor::fit(&train, true, Some(0.1)).unwrap();
    let back = Preprocessor::from_container(&pre.to_container().unwrap()).unwrap();
    assert_eq!(back, pre);
    assert_eq!(back.digest(), pre.digest());
    assert_ne!(Preprocessor::gcn_only().digest(), pre.digest());
    let a = pre.apply(&train.images).unwrap();
    assert!(a.all_finite());
    assert!(rel_err(a.data()[0] as f64, back.apply(&train.images).unwrap().data()[0] as f64) == 0.0);
}

#[test]
fn cifar_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let images = Tensor::from_fn(&[3, 3, 32, 32], |i| ((i * 31) % 256) as f32 / 255.0);
    let ds = Dataset::new(images, vec![2, 0, 9], 10, "test").unwrap();
    let p = dir.path().join("batch.bin");
    write_cifar_binary(&ds, &p, CifarFlavor::Cifar10).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 3 * 3073);
    let back = load_cifar_binary(&[&p], CifarFlavor::Cifar10, "test").unwrap();
    assert_eq!(back.labels, ds.labels);
    assert!(back.images.max_abs_diff(&ds.images) < 1e-6);

    std::fs::write(&p, [0u8; 3000]).unwrap();
    assert!(load_cifar_binary(&[&p], CifarFlavor::Cifar10, "test").is_err());
    assert!(load_cifar_binary(&[dir.path().join("missing.bin")], CifarFlavor::Cifar10, "test").is_err());
}

#[test]
fn cifar10_test_batch_when_available() {
    let Ok(dir) = std::env::var("CIFAR10_DIR") else {
        eprintln!("CIFAR10_DIR not set; skipping the real test batch");
        return;
    };
    let ds = load_cifar_binary(&[cifar10_test_file(&dir)], CifarFlavor::Cifar10, "test").unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.histogram(), vec![1000; 10]);
}
