//! Codebook quantization of a task's masked weights.
//!
//! Each layer's masked weights are clustered into at most `2^bits` values;
//! the slot stores the centroid index and the per-layer centroid table is kept
//! alongside the task. [`adaptive_quantize`] searches for the smallest
//! bit-width whose accuracy stays within tolerance of full precision.

pub mod kmeans;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{TaskId, TaskMask, SLOT_BITS};
use crate::nn::{self, DenseWeights, ModelSpec};
use crate::scenario::Dataset;
use crate::seed::{self, stream};

pub use kmeans::{kmeans_1d, kmeans_1d_warm, Clustering, KMeansConfig};

/// Per-layer centroid tables for one task at one bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub bits: u8,
    /// Ascending centroids per layer; at most `2^bits` each, empty for a
    /// layer the task does not use.
    pub layers: Vec<Vec<f32>>,
}

impl Codebook {
    /// Total number of stored centroids.
    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a task's slot codes map back to weight values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightCoding {
    Codebook(Codebook),
    /// Codes are the IEEE-754 bit patterns of the weights (32-bit components).
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTaskWeights {
    pub task: TaskId,
    pub mask: TaskMask,
    /// Per layer, one code per masked slot in ascending slot order.
    pub codes: Vec<Vec<u32>>,
    pub coding: WeightCoding,
}

impl QuantizedTaskWeights {
    pub fn bits(&self) -> u8 {
        match &self.coding {
            WeightCoding::Codebook(cb) => cb.bits,
            WeightCoding::Raw => SLOT_BITS,
        }
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match &self.coding {
            WeightCoding::Codebook(cb) => Some(cb),
            WeightCoding::Raw => None,
        }
    }

    /// Stores the masked weights verbatim as 32-bit components.
    pub fn raw(task: TaskId, mask: &TaskMask, weights: &DenseWeights) -> Self {
        let codes = (0..mask.num_layers())
            .map(|l| {
                weights
                    .masked_values(mask, l)
                    .into_iter()
                    .map(f32::to_bits)
                    .collect()
            })
            .collect();
        Self {
            task,
            mask: mask.clone(),
            codes,
            coding: WeightCoding::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub init_bits: u8,
    pub max_bits: u8,
    /// Largest acceptable absolute accuracy drop.
    pub delta: f64,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            init_bits: 2,
            max_bits: 8,
            delta: 0.01,
            kmeans_iters: 50,
            kmeans_restarts: 3,
            seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.init_bits && self.init_bits <= self.max_bits && self.max_bits <= 16) {
            return Err(Error::Config(format!(
                "quantization bits must satisfy 1 <= init_bits <= max_bits <= 16, got {} / {}",
                self.init_bits, self.max_bits
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "quantization delta must be a finite value >= 0, got {}",
                self.delta
            )));
        }
        if self.kmeans_iters == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("k-means iters and restarts must be positive".into()));
        }
        Ok(())
    }

    fn kmeans(&self, task: TaskId, bits: u8, layer: usize) -> KMeansConfig {
        KMeansConfig {
            iters: self.kmeans_iters,
            restarts: self.kmeans_restarts,
            seed: seed::derive(
                self.seed,
                &[stream::KMEANS, task as u64, bits as u64, layer as u64],
            ),
        }
    }
}

/// Result of quantizing one task at one bit-width.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub weights: QuantizedTaskWeights,
    /// Sum over layers of the k-means objective.
    pub sse: f64,
}

/// Clusters each layer's masked weights into at most `2^bits` centroids.
pub fn nonlinear_quantize(
    task: TaskId,
    bits: u8,
    mask: &TaskMask,
    weights: &DenseWeights,
    cfg: &QuantConfig,
) -> Result<Quantized> {
    nonlinear_quantize_warm(task, bits, mask, weights, cfg, None)
}

/// As [`nonlinear_quantize`], seeding each layer's k-means with the matching
/// layer of `warm` (normally the previous, narrower codebook).
pub fn nonlinear_quantize_warm(
    task: TaskId,
    bits: u8,
    mask: &TaskMask,
    weights: &DenseWeights,
    cfg: &QuantConfig,
    warm: Option<&Codebook>,
) -> Result<Quantized> {
    if bits == 0 || bits > 16 {
        return Err(Error::Config(format!("cannot build a {bits}-bit codebook")));
    }
    if mask.num_layers() != weights.layers.len() {
        return Err(Error::shape(
            0,
            format!("{} layers", weights.layers.len()),
            format!("{} mask layers", mask.num_layers()),
        ));
    }
    let k = 1usize << bits;
    let per_layer: Vec<(Vec<f32>, Vec<u32>, f64)> = (0..mask.num_layers())
        .into_par_iter()
        .map(|l| {
            let values: Vec<f64> = weights
                .masked_values(mask, l)
                .into_iter()
                .map(f64::from)
                .collect();
            if values.is_empty() {
                return Ok((Vec::new(), Vec::new(), 0.0));
            }
            let warm_layer: Option<Vec<f64>> = warm
                .and_then(|cb| cb.layers.get(l))
                .map(|c| c.iter().map(|&v| f64::from(v)).collect());
            let c = kmeans_1d_warm(&values, k, &cfg.kmeans(task, bits, l), warm_layer.as_deref())?;
            let centroids = c.centroids.iter().map(|&v| v as f32).collect();
            Ok((centroids, c.assignments, c.sse))
        })
        .collect::<Result<_>>()?;

    let mut layers = Vec::with_capacity(per_layer.len());
    let mut codes = Vec::with_capacity(per_layer.len());
    let mut sse = 0.0;
    for (centroids, assignment, e) in per_layer {
        layers.push(centroids);
        codes.push(assignment);
        sse += e;
    }
    Ok(Quantized {
        weights: QuantizedTaskWeights {
            task,
            mask: mask.clone(),
            codes,
            coding: WeightCoding::Codebook(Codebook { bits, layers }),
        },
        sse,
    })
}

/// Rebuilds the task's weights (zero outside its mask) with the given biases.
pub fn assemble(
    spec: &ModelSpec,
    q: &QuantizedTaskWeights,
    biases: &[Array1<f32>],
) -> Result<DenseWeights> {
    spec.check_mask(&q.mask)?;
    if q.codes.len() != spec.num_layers() || biases.len() != spec.num_layers() {
        return Err(Error::Corrupt(format!(
            "task {} has {} code layers and {} bias layers for a {}-layer model",
            q.task,
            q.codes.len(),
            biases.len(),
            spec.num_layers()
        )));
    }
    let mut out = DenseWeights::<f32>::zeros(spec);
    for (l, layer) in out.layers.iter_mut().enumerate() {
        if biases[l].len() != layer.bias.len() {
            return Err(Error::shape(l, layer.bias.len(), biases[l].len()));
        }
        layer.bias.assign(&biases[l]);
        let count = q.mask.count(l);
        if q.codes[l].len() != count {
            return Err(Error::Corrupt(format!(
                "task {} layer {l}: {} codes for {count} masked slots",
                q.task,
                q.codes[l].len()
            )));
        }
        let flat = layer.weights.as_slice_mut().expect("standard layout");
        for (slot, &code) in q.mask.iter_ones(l).zip(&q.codes[l]) {
            flat[slot] = match &q.coding {
                WeightCoding::Raw => f32::from_bits(code),
                WeightCoding::Codebook(cb) => {
                    let table = cb.layers.get(l).map(Vec::as_slice).unwrap_or(&[]);
                    *table.get(code as usize).ok_or_else(|| {
                        Error::Corrupt(format!(
                            "task {} layer {l} slot {slot}: code {code} outside a {}-entry codebook",
                            q.task,
                            table.len()
                        ))
                    })?
                }
            };
        }
    }
    Ok(out)
}

/// Masked weights decoded from codes; biases are zero.
pub fn dequantize(spec: &ModelSpec, q: &QuantizedTaskWeights) -> Result<DenseWeights> {
    let zeros: Vec<Array1<f32>> = spec
        .layer_sizes()
        .windows(2)
        .map(|w| Array1::zeros(w[1]))
        .collect();
    assemble(spec, q, &zeros)
}

#[derive(Debug, Clone)]
pub struct AdaptiveQuant {
    pub bits: u8,
    pub weights: QuantizedTaskWeights,
    /// Validation accuracy of the quantized model.
    pub accuracy: f64,
    /// Number of bit-widths tried.
    pub passes: usize,
    /// Reconstruction error at each tried bit-width.
    pub sse_trace: Vec<f64>,
    /// True when even `max_bits` fell short of the tolerance.
    pub tolerance_missed: bool,
}

/// Raises the bit-width from `init_bits` until validation accuracy is within
/// `delta` of `reference`, or `max_bits` is reached. `bit_budget` is the
/// fewest free bits among the masked slots; needing more is an error.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_quantize(
    task: TaskId,
    spec: &ModelSpec,
    mask: &TaskMask,
    trained: &DenseWeights,
    reference: f64,
    val: &Dataset,
    cfg: &QuantConfig,
    bit_budget: u8,
) -> Result<AdaptiveQuant> {
    cfg.validate()?;
    spec.check_mask(mask)?;
    spec.check_weights(trained)?;
    let biases = trained.biases();
    let target = reference - cfg.delta;
    let mut warm: Option<Codebook> = None;
    let mut sse_trace = Vec::new();
    let mut bits = cfg.init_bits;
    loop {
        if bits > bit_budget {
            return Err(Error::BitBudget {
                required: bits,
                available: bit_budget,
            });
        }
        let q = nonlinear_quantize_warm(task, bits, mask, trained, cfg, warm.as_ref())?;
        sse_trace.push(q.sse);
        let weights = assemble(spec, &q.weights, &biases)?;
        let accuracy = nn::evaluate(spec, &weights, mask, val)?;
        log::debug!("task {task}: {bits}-bit accuracy {accuracy:.4} (reference {reference:.4})");
        let within = accuracy >= target - 1e-12;
        if within || bits >= cfg.max_bits {
            if !within {
                log::warn!(
                    "task {task}: accuracy {accuracy:.4} at {bits} bits is still more than {} below {reference:.4}",
                    cfg.delta
                );
            }
            return Ok(AdaptiveQuant {
                bits,
                weights: q.weights,
                accuracy,
                passes: sse_trace.len(),
                sse_trace,
                tolerance_missed: !within,
            });
        }
        warm = q.weights.codebook().cloned();
        bits += 1;
    }
}
