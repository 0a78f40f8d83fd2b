//! Multilayer perceptron with softmax cross-entropy over flat parameter
//! vectors.
//!
//! Parameters are laid out layer by layer: the `fan_in x fan_out` weight
//! matrix in row-major order, followed by the `fan_out` bias vector. Logits for
//! a batch are therefore `X W + b` at every layer.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamVector;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 784,
            hidden_dims: vec![128],
            num_classes: 10,
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidSpec("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::InvalidSpec("hidden dims must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each dense layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of each layer's weight block and bias block in the flat vector.
    fn offsets(&self) -> Vec<LayerOffsets> {
        let mut off = 0;
        self.layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = off;
                let b = w + fan_in * fan_out;
                off = b + fan_out;
                LayerOffsets {
                    fan_in,
                    fan_out,
                    weights: w,
                    bias: b,
                }
            })
            .collect()
    }

    /// Ranges of the bias entries inside the flat vector.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.offsets()
            .iter()
            .map(|l| l.bias..l.bias + l.fan_out)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if self.inputs.ncols() != spec.input_dim {
            return Err(Error::dims(spec.input_dim, self.inputs.ncols()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.num_classes) {
            return Err(Error::InvalidBatch(format!(
                "label {bad} outside [0, {})",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases. Depends only on `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = stream_rng(seed, Stream::Init, &[]);
    let mut params = vec![0.0; spec.param_count()];
    for layer in spec.offsets() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params[layer.weights..layer.bias] {
            *w = rng.gen_range(-limit..=limit);
        }
    }
    ParamVector::new(params)
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(Error::dims(expected, params.len()));
    }
    Ok(())
}

fn layer_views<'a>(
    layer: &LayerOffsets,
    params: &'a [f64],
) -> (ArrayView2<'a, f64>, ndarray::ArrayView1<'a, f64>) {
    let w = ArrayView2::from_shape(
        (layer.fan_in, layer.fan_out),
        &params[layer.weights..layer.bias],
    )
    .expect("layer offsets match parameter layout");
    let b = ndarray::ArrayView1::from(&params[layer.bias..layer.bias + layer.fan_out]);
    (w, b)
}

fn activate(act: Activation, z: &mut Array2<f64>) {
    match act {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

/// Forward pass. Returns the input to every layer followed by the logits.
fn forward(
    spec: &ModelSpec,
    params: &[f64],
    inputs: ArrayView2<'_, f64>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let offsets = spec.offsets();
    let mut layer_inputs = Vec::with_capacity(offsets.len());
    let mut current = inputs.to_owned();
    for (idx, layer) in offsets.iter().enumerate() {
        let (w, b) = layer_views(layer, params);
        let mut z = current.dot(&w);
        z += &b;
        layer_inputs.push(current);
        if idx + 1 < offsets.len() {
            activate(spec.activation, &mut z);
        }
        current = z;
    }
    (layer_inputs, current)
}

/// Row-wise log-softmax with max subtraction.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    check_params(spec, params)?;
    batch.validate(spec)?;
    let params = params.as_slice();
    let offsets = spec.offsets();
    let (layer_inputs, logits) = forward(spec, params, batch.inputs.view());
    let log_probs = log_softmax(&logits);

    let rows = batch.len() as f64;
    let loss = -batch
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| log_probs[[r, y]])
        .sum::<f64>()
        / rows;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    // d loss / d logits = (softmax - onehot) / rows
    let mut delta = log_probs.mapv(f64::exp);
    for (r, &y) in batch.labels.iter().enumerate() {
        delta[[r, y]] -= 1.0;
    }
    delta /= rows;

    let mut grad = vec![0.0; params.len()];
    for (idx, layer) in offsets.iter().enumerate().rev() {
        let input = &layer_inputs[idx];
        let dw = input.t().dot(&delta);
        let db = delta.sum_axis(Axis(0));
        grad[layer.weights..layer.bias]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, v)| *g = *v);
        grad[layer.bias..layer.bias + layer.fan_out]
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, v)| *g = *v);

        if idx > 0 {
            let (w, _) = layer_views(layer, params);
            let mut upstream = delta.dot(&w.t());
            // `input` is the activated output of the previous layer.
            match spec.activation {
                Activation::Relu => {
                    ndarray::Zip::from(&mut upstream)
                        .and(input)
                        .for_each(|u, &a| {
                            if a <= 0.0 {
                                *u = 0.0;
                            }
                        });
                }
                Activation::Tanh => {
                    ndarray::Zip::from(&mut upstream)
                        .and(input)
                        .for_each(|u, &a| *u *= 1.0 - a * a);
                }
            }
            delta = upstream;
        }
    }

    let grad = ParamVector::new(grad);
    if !grad.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grad))
}

fn logits(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    if inputs.ncols() != spec.input_dim {
        return Err(Error::dims(spec.input_dim, inputs.ncols()));
    }
    Ok(forward(spec, params.as_slice(), inputs).1)
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Argmax class per row; ties go to the lowest class index.
pub fn predict(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<'_, f64>,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(spec, params, inputs)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy over a test set, processed in chunks.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, test_set: &Batch) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    test_set.validate(spec)?;
    check_params(spec, params)?;
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let n = test_set.len();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let view = test_set.inputs.slice(s![start..end, ..]);
        let z = logits(spec, params, view)?;
        let lp = log_softmax(&z);
        for (r, pred) in argmax_rows(&z).into_iter().enumerate() {
            let y = test_set.labels[start + r];
            if pred == y {
                correct += 1;
            }
            loss_sum -= lp[[r, y]];
        }
        start = end;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss_sum / n as f64,
    })
}

/// Copies the given dataset rows into a standalone batch.
pub fn gather_batch(inputs: &Array2<f64>, labels: &[usize], indices: &[usize]) -> Batch {
    let x = inputs.select(Axis(0), indices);
    let y = indices.iter().map(|&i| labels[i]).collect();
    Batch {
        inputs: x,
        labels: y,
    }
}
