//! Dense ReLU network with softmax cross-entropy, masked SGD and masked
//! inference.
//!
//! Weights are row-major `(out, in)` matrices; the flat index
//! `row * in + col` of a weight is its slot index in the corresponding
//! [`TaskMask`] layer. Biases are never masked.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::distributions::uniform::SampleUniform;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::TaskMask;
use crate::scenario::Dataset;
use crate::seed;

/// Element type of a network. Production runs use `f32`; `f64` exists for
/// numerical gradient checks.
pub trait Float: NdFloat + SampleUniform + Debug {}

impl Float for f32 {}
impl Float for f64 {}

fn cast<F: Float>(x: f64) -> F {
    F::from(x).expect("finite cast")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer sizes of a fully-connected network: input, hidden..., output.
/// Hidden layers use `activation`; the output layer emits raw logits for a
/// softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a model needs at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of weight tensors.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// `(out, in)` shape of weight tensor `layer`.
    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_sizes[layer + 1], self.layer_sizes[layer])
    }

    pub fn slot_counts(&self) -> Vec<usize> {
        (0..self.num_layers())
            .map(|l| {
                let (o, i) = self.layer_shape(l);
                o * i
            })
            .collect()
    }

    pub fn total_slots(&self) -> usize {
        self.slot_counts().iter().sum()
    }

    pub fn check_mask(&self, mask: &TaskMask) -> Result<()> {
        if mask.num_layers() != self.num_layers() {
            return Err(Error::shape(
                mask.num_layers().min(self.num_layers()),
                format!("{} mask layers", self.num_layers()),
                format!("{} mask layers", mask.num_layers()),
            ));
        }
        for (l, n) in self.slot_counts().into_iter().enumerate() {
            if mask.layer_len(l) != n {
                return Err(Error::shape(l, format!("{n} mask bits"), mask.layer_len(l)));
            }
        }
        Ok(())
    }

    pub fn check_weights<F: Float>(&self, weights: &DenseWeights<F>) -> Result<()> {
        if weights.layers.len() != self.num_layers() {
            return Err(Error::shape(
                weights.layers.len().min(self.num_layers()),
                format!("{} weight tensors", self.num_layers()),
                format!("{} weight tensors", weights.layers.len()),
            ));
        }
        for (l, layer) in weights.layers.iter().enumerate() {
            let (o, i) = self.layer_shape(l);
            if layer.weights.dim() != (o, i) || layer.bias.len() != o {
                return Err(Error::shape(
                    l,
                    format!("{o}x{i} weights, {o} biases"),
                    format!(
                        "{}x{} weights, {} biases",
                        layer.weights.nrows(),
                        layer.weights.ncols(),
                        layer.bias.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    /// `(out, in)`.
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights<F = f32> {
    pub layers: Vec<DenseLayer<F>>,
}

impl<F: Float> DenseWeights<F> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            layers: (0..spec.num_layers())
                .map(|l| {
                    let (o, i) = spec.layer_shape(l);
                    DenseLayer {
                        weights: Array2::zeros((o, i)),
                        bias: Array1::zeros(o),
                    }
                })
                .collect(),
        }
    }

    pub fn biases(&self) -> Vec<Array1<F>> {
        self.layers.iter().map(|l| l.bias.clone()).collect()
    }

    /// Values of `layer` at the mask's set slots, in ascending slot order.
    pub fn masked_values(&self, mask: &TaskMask, layer: usize) -> Vec<F> {
        let flat = self.layers[layer]
            .weights
            .as_slice()
            .expect("standard layout");
        mask.iter_ones(layer).map(|i| flat[i]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Exponentially decaying per-epoch learning rate with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decay: 0.97,
            floor: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        if !(lr.initial > lr.floor && lr.floor > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must satisfy initial > floor > 0, got {} / {}",
                lr.initial, lr.floor
            )));
        }
        if !(lr.decay > 0.0 && lr.decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {} not in (0, 1]", lr.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`,
/// zero biases.
pub fn xavier_init<F: Float>(spec: &ModelSpec, seed: u64) -> DenseWeights<F> {
    let mut rng = seed::rng(seed);
    let mut weights = DenseWeights::zeros(spec);
    for (l, layer) in weights.layers.iter_mut().enumerate() {
        let (fan_out, fan_in) = spec.layer_shape(l);
        let limit: F = cast(xavier_limit(fan_in, fan_out));
        let dist = Uniform::new_inclusive(-limit, limit);
        layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
    }
    weights
}

pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn mask_matrices<F: Float>(spec: &ModelSpec, mask: &TaskMask) -> Vec<Array2<F>> {
    (0..spec.num_layers())
        .map(|l| {
            let bits = mask.layer(l);
            let mut m = Array2::<F>::zeros(spec.layer_shape(l));
            for i in bits.iter_ones() {
                m.as_slice_mut().unwrap()[i] = F::one();
            }
            m
        })
        .collect()
}

fn masked_weights<F: Float>(weights: &DenseWeights<F>, masks: &[Array2<F>]) -> Vec<Array2<F>> {
    weights
        .layers
        .iter()
        .zip(masks)
        .map(|(l, m)| &l.weights * m)
        .collect()
}

fn check_batch<F>(spec: &ModelSpec, batch: &ArrayView2<F>) -> Result<()> {
    if batch.ncols() != spec.input_dim() {
        return Err(Error::shape(
            0,
            format!("{} input features", spec.input_dim()),
            format!("{} input features", batch.ncols()),
        ));
    }
    Ok(())
}

/// Activations of every layer: `acts[0]` is the input, `acts[L]` the logits.
fn forward_all<F: Float>(
    weights: &DenseWeights<F>,
    masked: &[Array2<F>],
    batch: ArrayView2<F>,
) -> Vec<Array2<F>> {
    let last = masked.len() - 1;
    let mut acts = Vec::with_capacity(masked.len() + 1);
    acts.push(batch.to_owned());
    for (l, w) in masked.iter().enumerate() {
        let mut z = acts[l].dot(&w.t());
        z += &weights.layers[l].bias;
        if l < last {
            z.mapv_inplace(|v| v.max(F::zero()));
        }
        acts.push(z);
    }
    acts
}

/// Logits of `batch` under `weights ⊙ mask`.
pub fn forward<F: Float>(
    spec: &ModelSpec,
    weights: &DenseWeights<F>,
    mask: &TaskMask,
    batch: ArrayView2<F>,
) -> Result<Array2<F>> {
    spec.check_weights(weights)?;
    spec.check_mask(mask)?;
    check_batch(spec, &batch)?;
    let masked = masked_weights(weights, &mask_matrices(spec, mask));
    Ok(forward_all(weights, &masked, batch).pop().unwrap())
}

/// Gradients of the mean loss; weight gradients are zero outside the mask.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

fn backward<F: Float>(
    masked: &[Array2<F>],
    masks: &[Array2<F>],
    acts: &[Array2<F>],
    labels: &[u32],
) -> (F, Gradients<F>) {
    let n = labels.len();
    let inv_n = F::one() / cast::<F>(n as f64);
    let logits = acts.last().unwrap();

    // Softmax cross-entropy: loss and dL/dz in one pass.
    let mut delta = logits.clone();
    let mut loss = F::zero();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss -= (row[y as usize] / sum).ln();
        row.mapv_inplace(|v| v / sum * inv_n);
        row[y as usize] -= inv_n;
    }

    let layers = masked.len();
    let mut grad_w = vec![Array2::zeros((0, 0)); layers];
    let mut grad_b = vec![Array1::zeros(0); layers];
    for l in (0..layers).rev() {
        let mut gw = delta.t().dot(&acts[l]);
        gw *= &masks[l];
        grad_w[l] = gw;
        grad_b[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut upstream = delta.dot(&masked[l]);
            Zip::from(&mut upstream)
                .and(&acts[l])
                .for_each(|d, &a| {
                    if a <= F::zero() {
                        *d = F::zero();
                    }
                });
            delta = upstream;
        }
    }
    (
        loss * inv_n,
        Gradients {
            weights: grad_w,
            biases: grad_b,
        },
    )
}

/// Mean softmax cross-entropy of `batch` and its gradients.
pub fn loss_and_gradients<F: Float>(
    spec: &ModelSpec,
    weights: &DenseWeights<F>,
    mask: &TaskMask,
    batch: ArrayView2<F>,
    labels: &[u32],
) -> Result<(F, Gradients<F>)> {
    spec.check_weights(weights)?;
    spec.check_mask(mask)?;
    check_batch(spec, &batch)?;
    check_labels(spec, batch.nrows(), labels)?;
    let masks = mask_matrices(spec, mask);
    let masked = masked_weights(weights, &masks);
    let acts = forward_all(weights, &masked, batch);
    Ok(backward(&masked, &masks, &acts, labels))
}

/// Mean loss only, for finite-difference checks.
pub fn loss<F: Float>(
    spec: &ModelSpec,
    weights: &DenseWeights<F>,
    mask: &TaskMask,
    batch: ArrayView2<F>,
    labels: &[u32],
) -> Result<F> {
    loss_and_gradients(spec, weights, mask, batch, labels).map(|(l, _)| l)
}

fn check_labels(spec: &ModelSpec, rows: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            spec.num_layers() - 1,
            format!("{rows} labels"),
            labels.len(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= spec.output_dim()) {
        return Err(Error::shape(
            spec.num_layers() - 1,
            format!("labels < {}", spec.output_dim()),
            format!("label {bad}"),
        ));
    }
    Ok(())
}

fn gather<F: Float>(data: &Dataset, rows: &[usize]) -> (Array2<F>, Vec<u32>) {
    let dim = data.features.ncols();
    let mut x = Array2::<F>::zeros((rows.len(), dim));
    for (mut dst, &r) in x.rows_mut().into_iter().zip(rows) {
        Zip::from(&mut dst)
            .and(data.features.row(r))
            .for_each(|d, &s| *d = cast(s as f64));
    }
    let y = rows.iter().map(|&r| data.labels[r]).collect();
    (x, y)
}

/// Mini-batch SGD on the slots selected by `mask`; every weight outside the
/// mask comes back bit-identical. Returns the trained weights and their
/// accuracy on `data`.
pub fn train_masked<F: Float>(
    spec: &ModelSpec,
    mut weights: DenseWeights<F>,
    mask: &TaskMask,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DenseWeights<F>, f64)> {
    spec.check_weights(&weights)?;
    spec.check_mask(mask)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training split".into()));
    }
    if data.features.ncols() != spec.input_dim() {
        return Err(Error::shape(0, spec.input_dim(), data.features.ncols()));
    }
    check_labels(spec, data.len(), &data.labels)?;
    for l in 0..spec.num_layers() {
        if mask.count(l) == 0 {
            log::warn!("layer {l} has an empty mask; the network cannot propagate through it");
        }
    }

    let masks = mask_matrices::<F>(spec, mask);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr: F = cast(cfg.lr.rate(epoch));
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let (x, y) = gather::<F>(data, rows);
            let masked = masked_weights(&weights, &masks);
            let acts = forward_all(&weights, &masked, x.view());
            let (_, grads) = backward(&masked, &masks, &acts, &y);
            for ((layer, gw), (gb, m)) in weights
                .layers
                .iter_mut()
                .zip(&grads.weights)
                .zip(grads.biases.iter().zip(&masks))
            {
                Zip::from(&mut layer.weights)
                    .and(gw)
                    .and(m)
                    .for_each(|w, &g, &keep| {
                        if keep != F::zero() {
                            *w -= lr * g;
                        }
                    });
                layer.bias.scaled_add(-lr, gb);
            }
        }
    }
    let accuracy = evaluate(spec, &weights, mask, data)?;
    Ok((weights, accuracy))
}

const EVAL_CHUNK: usize = 2048;

/// Predicted class per row: argmax of the logits, ties to the lowest index.
pub fn predict<F: Float>(
    spec: &ModelSpec,
    weights: &DenseWeights<F>,
    mask: &TaskMask,
    data: &Dataset,
) -> Result<Vec<u32>> {
    spec.check_weights(weights)?;
    spec.check_mask(mask)?;
    if data.features.ncols() != spec.input_dim() {
        return Err(Error::shape(0, spec.input_dim(), data.features.ncols()));
    }
    let masked = masked_weights(weights, &mask_matrices(spec, mask));
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data
            .features
            .slice(s![start..end, ..])
            .mapv(|v| cast::<F>(v as f64));
        let logits = forward_all(weights, &masked, x.view()).pop().unwrap();
        out.extend(logits.rows().into_iter().map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        }));
    }
    Ok(out)
}

/// Fraction of rows whose prediction matches the label.
pub fn evaluate<F: Float>(
    spec: &ModelSpec,
    weights: &DenseWeights<F>,
    mask: &TaskMask,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation split".into()));
    }
    let predictions = predict(spec, weights, mask, data)?;
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn spec(sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn spec_rejects_degenerate_shapes() {
        assert!(ModelSpec::new(vec![3]).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2]).is_err());
        let s = spec(&[784, 100, 10]);
        assert_eq!(s.slot_counts(), vec![78_400, 1_000]);
        assert_eq!(s.layer_shape(1), (10, 100));
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        assert!((xavier_limit(784, 100) - 0.082_385).abs() < 1e-5);
        assert!((xavier_limit(1, 1) - 3f64.sqrt()).abs() < 1e-12);

        let s = spec(&[784, 100, 10]);
        let w: DenseWeights<f32> = xavier_init(&s, 11);
        let a = xavier_limit(784, 100) as f32;
        assert!(w.layers[0].weights.iter().all(|v| v.abs() <= a));
        assert!(w.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(w, xavier_init(&s, 11));
        assert_ne!(w, xavier_init(&s, 12));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let s = spec(&[2, 2]);
        let mut w = DenseWeights::<f64>::zeros(&s);
        w.layers[0].weights = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = TaskMask::from_bools(&[vec![true, false, false, true]]);
        let out = forward(&s, &w, &mask, array![[3.0, -2.0]].view()).unwrap();
        assert_eq!(out, array![[3.0, -2.0]]);
    }

    #[test]
    fn full_mask_matches_plain_forward_and_empty_mask_leaves_bias() {
        let s = spec(&[3, 4, 2]);
        let mut w: DenseWeights<f64> = xavier_init(&s, 3);
        w.layers[0].bias = array![0.1, -0.2, 0.3, 0.0];
        w.layers[1].bias = array![0.5, -0.5];
        let x = array![[0.2, 0.4, 0.9], [1.0, 0.0, 0.3]];

        let full = forward(&s, &w, &TaskMask::full(&s.slot_counts()), x.view()).unwrap();
        let h = (x.dot(&w.layers[0].weights.t()) + &w.layers[0].bias).mapv(|v| v.max(0.0));
        let plain = h.dot(&w.layers[1].weights.t()) + &w.layers[1].bias;
        assert_eq!(full, plain);

        let empty = forward(&s, &w, &TaskMask::empty(&s.slot_counts()), x.view()).unwrap();
        // Zero weights: hidden = relu(b0), logits = b1 since the second
        // layer's weights are also masked out.
        assert_eq!(empty, array![[0.5, -0.5], [0.5, -0.5]]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let s = spec(&[3, 2]);
        let w = DenseWeights::<f32>::zeros(&s);
        let err = forward(&s, &w, &TaskMask::full(&[6]), Array2::zeros((1, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }), "{err}");
        let err = forward(&s, &w, &TaskMask::full(&[5]), Array2::zeros((1, 3)).view()).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn disjoint_masks_superimpose() {
        let s = spec(&[4, 3]);
        let w: DenseWeights<f64> = xavier_init(&s, 8);
        let bools_a: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let bools_b: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
        let union: Vec<bool> = bools_a.iter().zip(&bools_b).map(|(a, b)| *a || *b).collect();
        let x = array![[0.3, 0.1, 0.7, 0.9]];

        let mut superimposed = DenseWeights::<f64>::zeros(&s);
        for i in 0..12 {
            let v = w.layers[0].weights.as_slice().unwrap()[i];
            if bools_a[i] || bools_b[i] {
                superimposed.layers[0].weights.as_slice_mut().unwrap()[i] = v;
            }
        }
        let a = forward(&s, &w, &TaskMask::from_bools(&[union]), x.view()).unwrap();
        let b = forward(&s, &superimposed, &TaskMask::full(&[12]), x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_vanish_outside_the_mask() {
        let s = spec(&[3, 2]);
        let w: DenseWeights<f64> = xavier_init(&s, 1);
        let mask = TaskMask::from_bools(&[vec![true, false, true, false, true, false]]);
        let x = array![[1.0, 2.0, 3.0]];
        let (_, g) = loss_and_gradients(&s, &w, &mask, x.view(), &[1]).unwrap();
        for (i, &v) in g.weights[0].iter().enumerate() {
            if !mask.get(0, i) {
                assert_eq!(v, 0.0);
            }
        }
    }

    fn blob_data() -> Dataset {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = (i % 2) as u32;
            let base = if c == 0 { 0.2 } else { 0.8 };
            let jitter = (i as f32 * 0.37).sin() * 0.05;
            features.extend([base + jitter, base - jitter, 0.5 + jitter]);
            labels.push(c);
        }
        Dataset::new(Array2::from_shape_vec((40, 3), features).unwrap(), labels).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let s = spec(&[3, 4, 2]);
        let w: DenseWeights<f32> = xavier_init(&s, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, _) =
            train_masked(&s, w.clone(), &TaskMask::full(&s.slot_counts()), &blob_data(), &cfg)
                .unwrap();
        assert_eq!(trained, w);
    }

    #[test]
    fn training_never_touches_masked_out_weights() {
        let s = spec(&[3, 4, 2]);
        let w: DenseWeights<f32> = xavier_init(&s, 5);
        let mask = TaskMask::from_bools(&[
            (0..12).map(|i| i % 2 == 0).collect(),
            (0..8).map(|i| i != 3).collect(),
        ]);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: LrSchedule {
                initial: 0.5,
                decay: 0.9,
                floor: 0.01,
            },
            seed: 4,
        };
        let (trained, _) = train_masked(&s, w.clone(), &mask, &blob_data(), &cfg).unwrap();
        for l in 0..2 {
            let before = w.layers[l].weights.as_slice().unwrap();
            let after = trained.layers[l].weights.as_slice().unwrap();
            for i in 0..before.len() {
                if !mask.get(l, i) {
                    assert_eq!(before[i].to_bits(), after[i].to_bits());
                }
            }
        }
        assert_ne!(trained, w);

        let (again, _) = train_masked(&s, w, &mask, &blob_data(), &cfg).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn evaluate_breaks_ties_low_and_rejects_empty_data() {
        let s = spec(&[2, 3]);
        let w = DenseWeights::<f32>::zeros(&s);
        let mask = TaskMask::full(&[6]);
        let data = Dataset::new(array![[0.1, 0.2], [0.3, 0.4]], vec![0, 1]).unwrap();
        // All logits tie at zero, so every prediction is class 0.
        assert_eq!(predict(&s, &w, &mask, &data).unwrap(), vec![0, 0]);
        assert_eq!(evaluate(&s, &w, &mask, &data).unwrap(), 0.5);

        let empty = Dataset::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(matches!(
            evaluate(&s, &w, &mask, &empty),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn single_sample_can_be_memorised() {
        let s = spec(&[3, 5, 4]);
        let data = Dataset::new(array![[0.9, 0.1, 0.4]], vec![2]).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr: LrSchedule {
                initial: 0.1,
                decay: 1.0,
                floor: 0.001,
            },
            seed: 0,
        };
        let (w, acc) = train_masked(
            &s,
            xavier_init::<f32>(&s, 9),
            &TaskMask::full(&s.slot_counts()),
            &data,
            &cfg,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(evaluate(&s, &w, &TaskMask::full(&s.slot_counts()), &data).unwrap(), 1.0);
    }

    #[test]
    fn lr_schedule_decays_to_floor() {
        let lr = LrSchedule {
            initial: 0.01,
            decay: 0.5,
            floor: 1e-4,
        };
        assert_eq!(lr.rate(0), 0.01);
        assert_eq!(lr.rate(1), 0.005);
        assert_eq!(lr.rate(40), 1e-4);
        let bad = TrainConfig {
            lr: LrSchedule {
                initial: 1e-5,
                decay: 0.9,
                floor: 1e-4,
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
