#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pfcm_core::dataset::{ClientDataset, Sample, MATRIX_CELLS};
use pfcm_core::nn::{init_weights, CnnSpec, FlatWeights, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model used wherever the full model would only slow tests down.
pub fn tiny_spec() -> CnnSpec {
    CnnSpec {
        conv1_channels: 2,
        conv2_channels: 3,
        fc_hidden: 5,
        ..CnnSpec::default()
    }
}

pub fn random_batch(spec: &CnnSpec, n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let len = n * spec.in_channels * spec.spatial();
    Tensor::new(
        spec.input_shape(n),
        (0..len).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap()
}

pub fn random_labels(spec: &CnnSpec, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| r.random_range(0..spec.num_classes))
        .collect()
}

/// Init weights with every bias nudged so that no layer is trivially zero.
pub fn random_weights(spec: &CnnSpec, seed: u64) -> FlatWeights {
    let mut w = init_weights(spec, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for v in w.values_mut() {
        *v += r.random_range(-0.05..0.05);
    }
    w
}

pub fn random_sample(visit: u32, label: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut matrix = [0.0; MATRIX_CELLS];
    for v in matrix.iter_mut().take(MATRIX_CELLS - 1) {
        *v = r.random();
    }
    Sample {
        visit,
        matrix,
        label,
    }
}

pub fn random_client(id: &str, n: usize, classes: usize, seed: u64) -> ClientDataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|v| random_sample(v as u32, r.random_range(0..classes), r.random()))
        .collect();
    ClientDataset::new(id, samples).unwrap()
}

/// Straightforward scalar-loop forward pass, written independently of the
/// im2col implementation.
pub fn naive_forward(w: &FlatWeights, spec: &CnnSpec, batch: &Tensor) -> Vec<Vec<f64>> {
    let side = spec.input_side as isize;
    let k = spec.kernel_side as isize;
    let pad = k / 2;
    let hw = (side * side) as usize;
    let layer = |name: &str| w.layer(name).unwrap().to_vec();
    let (c1w, c1b) = (layer("conv1.weight"), layer("conv1.bias"));
    let (c2w, c2b) = (layer("conv2.weight"), layer("conv2.bias"));
    let (f1w, f1b) = (layer("fc1.weight"), layer("fc1.bias"));
    let (f2w, f2b) = (layer("fc2.weight"), layer("fc2.bias"));

    let conv = |input: &[f64], cin: usize, cout: usize, wt: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            for i in 0..side {
                for j in 0..side {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (ii, jj) = (i + ki - pad, j + kj - pad);
                                if ii < 0 || jj < 0 || ii >= side || jj >= side {
                                    continue;
                                }
                                let widx = ((o * cin + c) * k as usize + ki as usize) * k as usize
                                    + kj as usize;
                                acc += wt[widx] * input[c * hw + (ii * side + jj) as usize];
                            }
                        }
                    }
                    out[o * hw + (i * side + j) as usize] = acc.max(0.0);
                }
            }
        }
        out
    };

    let n = batch.shape()[0];
    let per = spec.in_channels * hw;
    (0..n)
        .map(|s| {
            let x = &batch.data()[s * per..(s + 1) * per];
            let a1 = conv(x, spec.in_channels, spec.conv1_channels, &c1w, &c1b);
            let a2 = conv(&a1, spec.conv1_channels, spec.conv2_channels, &c2w, &c2b);
            let hidden: Vec<f64> = (0..spec.fc_hidden)
                .map(|h| {
                    let row = &f1w[h * a2.len()..(h + 1) * a2.len()];
                    (f1b[h] + row.iter().zip(&a2).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
                })
                .collect();
            (0..spec.num_classes)
                .map(|c| {
                    let row = &f2w[c * spec.fc_hidden..(c + 1) * spec.fc_hidden];
                    f2b[c] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Mean cross-entropy computed directly from the naive logits.
pub fn naive_loss(w: &FlatWeights, spec: &CnnSpec, batch: &Tensor, labels: &[usize]) -> f64 {
    let logits = naive_forward(w, spec, batch);
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst relative error of `grad` against central finite differences of
/// the model loss.
pub fn finite_difference_error(
    spec: &CnnSpec,
    weights: &FlatWeights,
    batch: &Tensor,
    labels: &[usize],
) -> f64 {
    let (_, grad) = pfcm_core::nn::loss_and_grad(weights, spec, batch, labels).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = weights.clone();
    for i in 0..weights.len() {
        let orig = weights.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = pfcm_core::nn::loss_and_grad(&probe, spec, batch, labels)
            .unwrap()
            .0;
        probe.values_mut()[i] = orig - eps;
        let down = pfcm_core::nn::loss_and_grad(&probe, spec, batch, labels)
            .unwrap()
            .0;
        probe.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let g = grad.values()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
