mod common;

use common::*;
use pfcm_core::dataset::{to_batch, ClientDataset};
use pfcm_core::federation::{
    aggregate, apply_update, local_train, run_fedavg, Aggregation, ClientUpdate, FedAvgConfig,
    GlobalModelState, LocalTrainConfig,
};
use pfcm_core::ledger::Phase;
use pfcm_core::nn::{init_weights, loss_and_grad, CnnSpec, FlatWeights, SgdConfig};
use pfcm_core::AccessLedger;
use proptest::prelude::*;

fn config(rounds: usize, lr: f64, momentum: f64) -> FedAvgConfig {
    FedAvgConfig {
        rounds,
        local: LocalTrainConfig {
            sgd: SgdConfig {
                learning_rate: lr,
                momentum,
            },
            ..LocalTrainConfig::default()
        },
        ..FedAvgConfig::default()
    }
}

/// Plain full-batch gradient descent written against `loss_and_grad` only.
/// With a fresh optimizer per epoch the first momentum step is `v = g`.
fn centralized(
    spec: &CnnSpec,
    init: &FlatWeights,
    client: &ClientDataset,
    epochs: usize,
    lr: f64,
) -> FlatWeights {
    let (batch, labels) = to_batch(client.samples(&AccessLedger::new())).unwrap();
    let mut w = init.clone();
    for _ in 0..epochs {
        let (_, g) = loss_and_grad(&w, spec, &batch, &labels).unwrap();
        for (wi, gi) in w.values_mut().iter_mut().zip(g.values()) {
            *wi -= lr * gi;
        }
    }
    w
}

#[test]
fn single_client_fedavg_equals_centralized_training() {
    for spec in [tiny_spec(), CnnSpec::default()] {
        let init = init_weights(&spec, 3).unwrap();
        let client = random_client("a", 5, spec.num_classes, 4);
        for momentum in [0.0, 0.5] {
            let (state, reports) = run_fedavg(
                &spec,
                init.clone(),
                std::slice::from_ref(&client),
                &config(8, 0.1, momentum),
                &AccessLedger::new(),
            )
            .unwrap();
            assert_eq!(state.round, 8);
            assert_eq!(reports.len(), 8);
            let oracle = centralized(&spec, &init, &client, 8, 0.1);
            assert!(max_abs_diff(state.weights.values(), oracle.values()) <= 1e-12);
        }
    }
}

#[test]
fn identical_clients_follow_the_single_client_trajectory() {
    let spec = tiny_spec();
    let init = init_weights(&spec, 5).unwrap();
    let a = random_client("a", 4, 3, 6);
    let clones = [a.clone(), a.with_id("b"), a.with_id("c")];
    let cfg = config(6, 0.1, 0.5);
    let (one, _) = run_fedavg(&spec, init.clone(), &[a], &cfg, &AccessLedger::new()).unwrap();
    let (many, _) = run_fedavg(&spec, init, &clones, &cfg, &AccessLedger::new()).unwrap();
    assert!(max_abs_diff(one.weights.values(), many.weights.values()) <= 1e-12);
}

#[test]
fn zero_learning_rate_gives_zero_delta() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 7);
    let client = random_client("a", 3, 3, 8);
    let cfg = LocalTrainConfig {
        sgd: SgdConfig {
            learning_rate: 0.0,
            momentum: 0.5,
        },
        epochs: 3,
        ..LocalTrainConfig::default()
    };
    let update = local_train(&w, &spec, &client, &cfg, &AccessLedger::new()).unwrap();
    assert!(update.delta.values().iter().all(|&v| v == 0.0));
    assert_eq!(update.num_samples, 3);
}

#[test]
fn one_step_delta_matches_hand_computation() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 9);
    let client = random_client("solo", 1, 3, 10);
    let (batch, labels) = to_batch(client.samples(&AccessLedger::new())).unwrap();
    let (_, g) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    let lr = 0.1;
    let update = local_train(
        &w,
        &spec,
        &client,
        &config(1, lr, 0.5).local,
        &AccessLedger::new(),
    )
    .unwrap();
    // fresh velocity: v = 0.5 * 0 + g, so delta = -lr * g
    for (d, gi) in update.delta.values().iter().zip(g.values()) {
        assert!((d + lr * gi).abs() <= 1e-15);
    }
}

#[test]
fn momentum_only_acts_within_a_call() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 11);
    let client = random_client("m", 2, 3, 12);
    let ledger = AccessLedger::new();
    let (batch, labels) = to_batch(client.samples(&ledger)).unwrap();
    let (lr, mu) = (0.1, 0.5);
    let cfg = LocalTrainConfig {
        epochs: 2,
        ..config(1, lr, mu).local
    };
    let update = local_train(&w, &spec, &client, &cfg, &ledger).unwrap();
    // two hand steps: v1 = g0, w1 = w0 - lr v1; v2 = mu v1 + g1, w2 = w1 - lr v2
    let (_, g0) = loss_and_grad(&w, &spec, &batch, &labels).unwrap();
    let mut w1 = w.clone();
    w1.add_scaled(&g0, -lr).unwrap();
    let (_, g1) = loss_and_grad(&w1, &spec, &batch, &labels).unwrap();
    let mut v2 = g0.clone();
    v2.scale(mu);
    v2.add_scaled(&g1, 1.0).unwrap();
    let mut w2 = w1.clone();
    w2.add_scaled(&v2, -lr).unwrap();
    let expected = w2.sub(&w).unwrap();
    assert!(max_abs_diff(update.delta.values(), expected.values()) <= 1e-15);
}

#[test]
fn zero_rounds_return_the_initial_model() {
    let spec = tiny_spec();
    let init = random_weights(&spec, 13);
    let clients = [random_client("a", 3, 3, 14)];
    let (state, reports) = run_fedavg(
        &spec,
        init.clone(),
        &clients,
        &config(0, 0.1, 0.5),
        &AccessLedger::new(),
    )
    .unwrap();
    assert_eq!(state.weights, init);
    assert_eq!(state.round, 0);
    assert!(reports.is_empty());
}

#[test]
fn fedavg_is_deterministic_and_reports_rounds() {
    let spec = tiny_spec();
    let init = init_weights(&spec, 15).unwrap();
    let clients: Vec<_> = (0..5)
        .map(|i| random_client(&format!("c{i}"), 2 + i, 3, 16 + i as u64))
        .collect();
    let mut cfg = config(4, 0.1, 0.5);
    cfg.local.batch_size = Some(2);
    cfg.local.shuffle_seed = 99;
    let (a, ra) = run_fedavg(&spec, init.clone(), &clients, &cfg, &AccessLedger::new()).unwrap();
    let (b, rb) = run_fedavg(&spec, init, &clients, &cfg, &AccessLedger::new()).unwrap();
    assert_eq!(a.weights.to_le_bytes(), b.weights.to_le_bytes());
    assert_eq!(ra, rb);
    assert_eq!(ra.iter().map(|r| r.round).collect::<Vec<_>>(), [1, 2, 3, 4]);
    for r in &ra {
        assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.client_losses.len(), 5);
    }
}

#[test]
fn no_clients_is_an_error() {
    let spec = tiny_spec();
    let init = init_weights(&spec, 0).unwrap();
    assert!(run_fedavg(&spec, init, &[], &config(1, 0.1, 0.5), &AccessLedger::new()).is_err());
    assert!(aggregate(&[], Aggregation::Unweighted).is_err());
}

#[test]
fn local_training_reads_only_its_own_client() {
    let spec = tiny_spec();
    let w = init_weights(&spec, 1).unwrap();
    let a = random_client("a", 3, 3, 2);
    let _b = random_client("b", 3, 3, 3);
    let ledger = AccessLedger::new();
    ledger.enter(Phase::FedAvg);
    local_train(&w, &spec, &a, &config(1, 0.1, 0.5).local, &ledger).unwrap();
    let read = ledger.samples_read(Phase::FedAvg);
    assert_eq!(read.len(), 3);
    assert!(read.iter().all(|id| id.client_id == "a"));
}

#[test]
fn server_step_follows_the_update_rule() {
    let spec = tiny_spec();
    let w = random_weights(&spec, 17);
    let d = random_weights(&spec, 18);
    let frozen = apply_update(&GlobalModelState::new(w.clone(), 0.0).unwrap(), &d).unwrap();
    assert_eq!(frozen.weights, w);
    assert_eq!(frozen.round, 1);

    let zero = FlatWeights::zeros(w.layout().clone());
    let half = apply_update(&GlobalModelState::new(zero, 0.5).unwrap(), &d).unwrap();
    for (h, v) in half.weights.values().iter().zip(d.values()) {
        assert_eq!(*h, 0.5 * v);
    }
    assert!(GlobalModelState::new(w, -1.0).is_err());
}

fn updates_from(values: &[Vec<f64>], sizes: &[usize], spec: &CnnSpec) -> Vec<ClientUpdate> {
    let layout = init_weights(spec, 0).unwrap().layout().clone();
    values
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (v, &n))| ClientUpdate {
            client_id: format!("client{i:02}"),
            delta: FlatWeights::new(layout.clone(), v.clone()).unwrap(),
            num_samples: n,
        })
        .collect()
}

fn random_updates(seed: u64, m: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand::Rng;
    let spec = tiny_spec();
    let mut r = rng(seed);
    let values = (0..m)
        .map(|_| {
            (0..spec.param_count())
                .map(|_| r.random_range(-1e-2..1e-2))
                .collect()
        })
        .collect();
    let sizes = (0..m).map(|_| r.random_range(1..8)).collect();
    (values, sizes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn aggregate_matches_naive_mean(seed in any::<u64>(), m in 1usize..7) {
        let spec = tiny_spec();
        let (values, sizes) = random_updates(seed, m);
        let updates = updates_from(&values, &sizes, &spec);
        let mean = aggregate(&updates, Aggregation::Unweighted).unwrap();
        let weighted = aggregate(&updates, Aggregation::SampleWeighted).unwrap();
        let total: usize = sizes.iter().sum();
        for j in 0..spec.param_count() {
            let naive: f64 = values.iter().map(|v| v[j]).sum::<f64>() / m as f64;
            prop_assert!((mean.values()[j] - naive).abs() <= 1e-12);
            let naive_w: f64 = values.iter().zip(&sizes).map(|(v, &n)| v[j] * n as f64).sum::<f64>() / total as f64;
            prop_assert!((weighted.values()[j] - naive_w).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant_bitwise(seed in any::<u64>(), m in 2usize..7) {
        let spec = tiny_spec();
        let (values, sizes) = random_updates(seed, m);
        let updates = updates_from(&values, &sizes, &spec);
        let mut reversed = updates.clone();
        reversed.reverse();
        reversed.rotate_left(1);
        let a = aggregate(&updates, Aggregation::Unweighted).unwrap();
        let b = aggregate(&reversed, Aggregation::Unweighted).unwrap();
        prop_assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn aggregate_is_linear(seed in any::<u64>(), m in 1usize..7, c in -4.0f64..4.0) {
        let spec = tiny_spec();
        let (values, sizes) = random_updates(seed, m);
        let scaled: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        let base = aggregate(&updates_from(&values, &sizes, &spec), Aggregation::Unweighted).unwrap();
        let lhs = aggregate(&updates_from(&scaled, &sizes, &spec), Aggregation::Unweighted).unwrap();
        for (l, b) in lhs.values().iter().zip(base.values()) {
            prop_assert!((l - c * b).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_deltas_average_to_themselves(seed in any::<u64>(), m in 1usize..7) {
        let spec = tiny_spec();
        let (values, _) = random_updates(seed, 1);
        let copies = vec![values[0].clone(); m];
        let mean = aggregate(&updates_from(&copies, &vec![1; m], &spec), Aggregation::Unweighted).unwrap();
        prop_assert!(max_abs_diff(mean.values(), &values[0]) <= 1e-12);
        if m == 1 {
            prop_assert_eq!(mean.values(), values[0].as_slice());
        }
    }
}
