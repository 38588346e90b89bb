use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::spec::CnnSpec;
use super::tensor::Tensor;
use super::weights::{FlatWeights, Layout};
use crate::error::{Error, Result};

/// Borrowed per-layer views into a flat weight vector. Conv kernels are
/// viewed as `[out_channels, in_channels * k * k]` matrices.
struct Params<'a> {
    conv1_w: ArrayView2<'a, f64>,
    conv1_b: &'a [f64],
    conv2_w: ArrayView2<'a, f64>,
    conv2_b: &'a [f64],
    fc1_w: ArrayView2<'a, f64>,
    fc1_b: &'a [f64],
    fc2_w: ArrayView2<'a, f64>,
    fc2_b: &'a [f64],
}

impl<'a> Params<'a> {
    fn new(weights: &'a FlatWeights, spec: &CnnSpec) -> Result<Self> {
        let layout = Layout::for_spec(spec)?;
        if weights.len() != layout.total() {
            return Err(Error::Length {
                expected: layout.total(),
                actual: weights.len(),
            });
        }
        if **weights.layout() != layout {
            return Err(Error::Layout(format!(
                "weights laid out as `{}`, model expects `{layout}`",
                weights.layout()
            )));
        }
        let v = weights.values();
        let slot = |i: usize| &v[layout.slots()[i].range()];
        let matrix = |i: usize, rows: usize| {
            let data = slot(i);
            ArrayView2::from_shape((rows, data.len() / rows), data).expect("slot shape")
        };
        Ok(Self {
            conv1_w: matrix(0, spec.conv1_channels),
            conv1_b: slot(1),
            conv2_w: matrix(2, spec.conv2_channels),
            conv2_b: slot(3),
            fc1_w: matrix(4, spec.fc_hidden),
            fc1_b: slot(5),
            fc2_w: matrix(6, spec.num_classes),
            fc2_b: slot(7),
        })
    }
}

/// Intermediate activations kept for the backward pass. Conv activations are
/// stored channel-major as `[channels, batch * spatial]`.
struct Activations {
    cols1: Array2<f64>,
    a1: Array2<f64>,
    cols2: Array2<f64>,
    a2: Array2<f64>,
    flat: Array2<f64>,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

fn check_batch(spec: &CnnSpec, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    let n = shape[0];
    if shape != spec.input_shape(n).as_slice() {
        return Err(Error::Shape {
            layer: "input".into(),
            expected: spec.input_shape(n),
            actual: shape.to_vec(),
        });
    }
    Ok(n)
}

/// Unfolds every `k × k` zero-padded patch into a column.
///
/// Row `(c * k + ki) * k + kj` holds channel `c` shifted by `(ki - pad,
/// kj - pad)`, matching the row-major `[in, k, k]` kernel layout.
fn im2col(input: &Array2<f64>, batch: usize, side: usize, k: usize) -> Array2<f64> {
    let channels = input.nrows();
    let hw = side * side;
    let pad = (k / 2) as isize;
    let side_i = side as isize;
    let mut cols = Array2::zeros((channels * k * k, batch * hw));
    for c in 0..channels {
        let src = input.row(c);
        for ki in 0..k {
            for kj in 0..k {
                let mut dst = cols.row_mut((c * k + ki) * k + kj);
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for s in 0..batch {
                    let base = s * hw;
                    for i in 0..side_i {
                        let ii = i + di;
                        if !(0..side_i).contains(&ii) {
                            continue;
                        }
                        for j in 0..side_i {
                            let jj = j + dj;
                            if !(0..side_i).contains(&jj) {
                                continue;
                            }
                            dst[base + (i * side_i + j) as usize] =
                                src[base + (ii * side_i + jj) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &Array2<f64>, channels: usize, batch: usize, side: usize, k: usize) -> Array2<f64> {
    let hw = side * side;
    let pad = (k / 2) as isize;
    let side_i = side as isize;
    let mut out = Array2::zeros((channels, batch * hw));
    for c in 0..channels {
        let mut dst = out.row_mut(c);
        for ki in 0..k {
            for kj in 0..k {
                let src = cols.row((c * k + ki) * k + kj);
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for s in 0..batch {
                    let base = s * hw;
                    for i in 0..side_i {
                        let ii = i + di;
                        if !(0..side_i).contains(&ii) {
                            continue;
                        }
                        for j in 0..side_i {
                            let jj = j + dj;
                            if !(0..side_i).contains(&jj) {
                                continue;
                            }
                            dst[base + (ii * side_i + jj) as usize] +=
                                src[base + (i * side_i + j) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_row_bias(m: &mut Array2<f64>, bias: &[f64]) {
    for (mut row, b) in m.rows_mut().into_iter().zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
}

fn add_col_bias(m: &mut Array2<f64>, bias: &[f64]) {
    for mut row in m.rows_mut() {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn relu(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Zeroes gradient entries whose post-ReLU activation is not positive.
fn relu_backward(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    grad.zip_mut_with(activation, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

fn run_forward(p: &Params<'_>, spec: &CnnSpec, batch: &Tensor) -> Activations {
    let n = batch.shape()[0];
    let side = spec.input_side;
    let hw = spec.spatial();
    let k = spec.kernel_side;

    let mut x = Array2::zeros((spec.in_channels, n * hw));
    for s in 0..n {
        for c in 0..spec.in_channels {
            let src = &batch.data()[(s * spec.in_channels + c) * hw..][..hw];
            x.slice_mut(s![c, s * hw..(s + 1) * hw])
                .iter_mut()
                .zip(src)
                .for_each(|(d, v)| *d = *v);
        }
    }

    let cols1 = im2col(&x, n, side, k);
    let mut a1 = p.conv1_w.dot(&cols1);
    add_row_bias(&mut a1, p.conv1_b);
    relu(&mut a1);

    let cols2 = im2col(&a1, n, side, k);
    let mut a2 = p.conv2_w.dot(&cols2);
    add_row_bias(&mut a2, p.conv2_b);
    relu(&mut a2);

    let mut flat = Array2::zeros((n, spec.flat_features()));
    for s in 0..n {
        for c in 0..spec.conv2_channels {
            flat.slice_mut(s![s, c * hw..(c + 1) * hw])
                .assign(&a2.slice(s![c, s * hw..(s + 1) * hw]));
        }
    }

    let mut hidden = flat.dot(&p.fc1_w.t());
    add_col_bias(&mut hidden, p.fc1_b);
    relu(&mut hidden);

    let mut logits = hidden.dot(&p.fc2_w.t());
    add_col_bias(&mut logits, p.fc2_b);

    Activations {
        cols1,
        a1,
        cols2,
        a2,
        flat,
        hidden,
        logits,
    }
}

fn to_tensor(m: Array2<f64>) -> Tensor {
    let (rows, cols) = m.dim();
    let data = m.iter().copied().collect();
    Tensor::new(vec![rows, cols], data).expect("logit shape")
}

/// Logits `[N, num_classes]` for a `[N, in_channels, side, side]` batch.
pub fn forward(weights: &FlatWeights, spec: &CnnSpec, batch: &Tensor) -> Result<Tensor> {
    let params = Params::new(weights, spec)?;
    check_batch(spec, batch)?;
    Ok(to_tensor(run_forward(&params, spec, batch).logits))
}

/// Argmax class per sample; ties go to the lowest class id.
pub fn predict(weights: &FlatWeights, spec: &CnnSpec, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(weights, spec, batch)?;
    Ok((0..logits.shape()[0])
        .map(|i| argmax(logits.row(i)))
        .collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Length {
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes,
        });
    }
    Ok(())
}

/// Row-wise log-sum-exp and softmax of a logit matrix.
fn softmax_rows(logits: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut probs = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, out) in probs.rows_mut().into_iter().zip(lse.iter_mut()) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        *out = max + sum.ln();
    }
    (lse, probs)
}

fn mean_cross_entropy(logits: &Array2<f64>, lse: &Array1<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| lse[i] - logits[[i, y]])
        .sum();
    total / labels.len() as f64
}

/// Mean softmax cross-entropy of a `[N, C]` logit tensor.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Tensor(format!("logits must be 2-d, got {shape:?}")));
    }
    check_labels(labels, shape[0], shape[1])?;
    let m = ArrayView2::from_shape((shape[0], shape[1]), logits.data())
        .expect("checked shape")
        .to_owned();
    let (lse, _) = softmax_rows(&m);
    Ok(mean_cross_entropy(&m, &lse, labels))
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter, laid out like `weights`.
pub fn loss_and_grad(
    weights: &FlatWeights,
    spec: &CnnSpec,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, FlatWeights)> {
    let p = Params::new(weights, spec)?;
    let n = check_batch(spec, batch)?;
    check_labels(labels, n, spec.num_classes)?;

    let act = run_forward(&p, spec, batch);
    let (lse, probs) = softmax_rows(&act.logits);
    let loss = mean_cross_entropy(&act.logits, &lse, labels);

    let hw = spec.spatial();
    let inv_n = 1.0 / n as f64;
    let mut d_logits = probs;
    for (i, &y) in labels.iter().enumerate() {
        d_logits[[i, y]] -= 1.0;
    }
    d_logits.mapv_inplace(|v| v * inv_n);

    let d_fc2_w = d_logits.t().dot(&act.hidden);
    let d_fc2_b = d_logits.sum_axis(Axis(0));
    let mut d_hidden = d_logits.dot(&p.fc2_w);
    relu_backward(&mut d_hidden, &act.hidden);

    let d_fc1_w = d_hidden.t().dot(&act.flat);
    let d_fc1_b = d_hidden.sum_axis(Axis(0));
    let d_flat = d_hidden.dot(&p.fc1_w);

    let mut d_a2 = Array2::zeros(act.a2.dim());
    for s in 0..n {
        for c in 0..spec.conv2_channels {
            d_a2.slice_mut(s![c, s * hw..(s + 1) * hw])
                .assign(&d_flat.slice(s![s, c * hw..(c + 1) * hw]));
        }
    }
    relu_backward(&mut d_a2, &act.a2);

    let d_conv2_w = d_a2.dot(&act.cols2.t());
    let d_conv2_b = d_a2.sum_axis(Axis(1));
    let d_cols2 = p.conv2_w.t().dot(&d_a2);
    let mut d_a1 = col2im(
        &d_cols2,
        spec.conv1_channels,
        n,
        spec.input_side,
        spec.kernel_side,
    );
    relu_backward(&mut d_a1, &act.a1);

    let d_conv1_w = d_a1.dot(&act.cols1.t());
    let d_conv1_b = d_a1.sum_axis(Axis(1));

    let mut grad = weights.zeros_like();
    let layout = grad.layout().clone();
    let parts: [Box<dyn Iterator<Item = &f64>>; 8] = [
        Box::new(d_conv1_w.iter()),
        Box::new(d_conv1_b.iter()),
        Box::new(d_conv2_w.iter()),
        Box::new(d_conv2_b.iter()),
        Box::new(d_fc1_w.iter()),
        Box::new(d_fc1_b.iter()),
        Box::new(d_fc2_w.iter()),
        Box::new(d_fc2_b.iter()),
    ];
    for (slot, part) in layout.slots().iter().zip(parts) {
        for (dst, src) in grad.values_mut()[slot.range()].iter_mut().zip(part) {
            *dst = *src;
        }
    }
    Ok((loss, grad))
}
