mod common;

use common::*;
use pfcm_core::nn::{
    forward, init_weights, loss_and_grad, predict, read_checkpoint, sgd_step,
    softmax_cross_entropy, write_checkpoint, CnnSpec, FlatWeights, OptimizerState, SgdConfig,
    Tensor,
};
use proptest::prelude::*;

#[test]
fn forward_matches_scalar_loops() {
    for (spec, seed) in [
        (CnnSpec::default(), 1),
        (tiny_spec(), 2),
        (CnnSpec::with_classes(2), 3),
    ] {
        let w = random_weights(&spec, seed);
        let batch = random_batch(&spec, 4, seed + 10);
        let fast = forward(&w, &spec, &batch).unwrap();
        let slow = naive_forward(&w, &spec, &batch);
        assert_eq!(fast.shape(), &[4, spec.num_classes]);
        for (i, row) in slow.iter().enumerate() {
            assert!(max_abs_diff(fast.row(i), row) < 1e-10, "sample {i}");
        }
    }
}

#[test]
fn five_by_five_kernels_match_scalar_loops() {
    let spec = CnnSpec {
        kernel_side: 5,
        ..tiny_spec()
    };
    let w = random_weights(&spec, 4);
    let batch = random_batch(&spec, 2, 5);
    let fast = forward(&w, &spec, &batch).unwrap();
    for (i, row) in naive_forward(&w, &spec, &batch).iter().enumerate() {
        assert!(max_abs_diff(fast.row(i), row) < 1e-10);
    }
}

#[test]
fn loss_matches_scalar_loops() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 6);
    let batch = random_batch(&spec, 5, 7);
    let labels = random_labels(&spec, 5, 8);
    let (loss, _) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    assert!((loss - naive_loss(&w, &spec, &batch, &labels)).abs() < 1e-10);
}

#[test]
fn gradient_matches_finite_differences_single_sample() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 11);
    let batch = random_batch(&spec, 1, 12);
    assert!(finite_difference_error(&spec, &w, &batch, &[2]) < 1e-4);
}

#[test]
fn gradient_matches_finite_differences_batch() {
    let spec = CnnSpec {
        num_classes: 2,
        ..tiny_spec()
    };
    let w = random_weights(&spec, 13);
    let batch = random_batch(&spec, 3, 14);
    assert!(finite_difference_error(&spec, &w, &batch, &[0, 1, 1]) < 1e-4);
}

#[test]
fn zero_weights_give_zero_logits_and_uniform_loss() {
    let spec = CnnSpec::default();
    let w = FlatWeights::zeros(init_weights(&spec, 0).unwrap().layout().clone());
    let batch = random_batch(&spec, 3, 1);
    let logits = forward(&w, &spec, &batch).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    assert_eq!(predict(&w, &spec, &batch).unwrap(), vec![0, 0, 0]);
    let (loss, _) = loss_and_grad(&w, &spec, &batch, &[0, 1, 2]).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn uniform_logits_give_log_c() {
    for c in [2usize, 3] {
        let logits = Tensor::new(vec![4, c], vec![0.7; 4 * c]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-15);
    }
}

#[test]
fn duplicated_rows_give_identical_logits() {
    let spec = CnnSpec::default();
    let w = random_weights(&spec, 21);
    let one = random_batch(&spec, 1, 22);
    let twice = Tensor::new(spec.input_shape(2), [one.data(), one.data()].concat()).unwrap();
    let logits = forward(&w, &spec, &twice).unwrap();
    assert_eq!(logits.row(0), logits.row(1));
}

#[test]
fn doubling_the_batch_keeps_loss_and_gradient() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 31);
    let batch = random_batch(&spec, 3, 32);
    let labels = vec![0, 2, 1];
    let doubled = Tensor::new(spec.input_shape(6), [batch.data(), batch.data()].concat()).unwrap();
    let doubled_labels = [labels.as_slice(), labels.as_slice()].concat();
    let (l1, g1) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    let (l2, g2) = loss_and_grad(&w, &spec, &doubled, &doubled_labels).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    assert!(max_abs_diff(g1.values(), g2.values()) < 1e-14);
}

#[test]
fn gradient_step_lowers_loss() {
    let spec = CnnSpec::default();
    let mut w = random_weights(&spec, 41);
    let batch = random_batch(&spec, 6, 42);
    let labels = random_labels(&spec, 6, 43);
    let (before, grad) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    let mut opt = OptimizerState::new(
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.0,
        },
        &w,
    );
    sgd_step(&mut w, &grad, &mut opt).unwrap();
    let (after, _) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    assert!(after < before);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let spec = CnnSpec::default();
    let w = init_weights(&spec, 0).unwrap();
    let batch = Tensor::zeros(vec![2, 1, 8, 8]).unwrap();
    assert!(forward(&w, &spec, &batch).is_err());
    let ok = random_batch(&spec, 2, 0);
    assert!(loss_and_grad(&w, &spec, &ok, &[0]).is_err());
    assert!(loss_and_grad(&w, &spec, &ok, &[0, 3]).is_err());
    let other = init_weights(&tiny_spec(), 0).unwrap();
    assert!(forward(&other, &spec, &ok).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(seed in any::<u64>()) {
        let spec = tiny_spec();
        let w = random_weights(&spec, seed);
        let mut bytes = Vec::new();
        write_checkpoint(&w, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.to_le_bytes(), w.to_le_bytes());
        prop_assert_eq!(back.layout(), w.layout());
    }

    #[test]
    fn predictions_do_not_depend_on_batch_composition(seed in any::<u64>(), n in 1usize..5) {
        let spec = tiny_spec();
        let w = random_weights(&spec, seed);
        let batch = random_batch(&spec, n, seed.wrapping_add(1));
        let all = forward(&w, &spec, &batch).unwrap();
        let per = spec.spatial();
        for i in 0..n {
            let single = Tensor::new(spec.input_shape(1), batch.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let row = forward(&w, &spec, &single).unwrap();
            prop_assert!(max_abs_diff(row.row(0), all.row(i)) < 1e-12);
        }
    }
}
