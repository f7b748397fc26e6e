//! Analytic gradients against central finite differences in f64.

mod common;

use common::*;
use qhconv::nn::Mode;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_layer_type_matches_finite_differences() {
    for (name, cfg, mode) in layer_fixtures() {
        for seed in 0..10 {
            let (ei, ep) = grad_check(&cfg, mode, seed, H);
            assert!(ei < TOL && ep < TOL, "{name} seed {seed}: input {ei:e}, params {ep:e}");
        }
    }
}

#[test]
fn end_to_end_cross_entropy_matches_finite_differences() {
    let cfg = three_layer_config();
    for seed in 0..10 {
        for mode in [Mode::Eval, Mode::Train { seed: 100 + seed }] {
            let (ei, ep) = grad_check_ce(&cfg, mode, seed, H);
            assert!(ei < TOL && ep < TOL, "seed {seed} {mode:?}: input {ei:e}, params {ep:e}");
        }
    }
}

#[test]
fn relu_blocks_negative_preactivations() {
    use qhconv::nn::layers::{relu_backward, relu_forward};
    use qhconv::Tensor;
    let x = Tensor::from_vec(&[1, 4], vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
    let y = relu_forward(&x);
    let g = relu_backward(&y, &Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap());
    assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);
}
