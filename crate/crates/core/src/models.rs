//! Surrogate encoder/decoder networks and ensemble training.
//!
//! All networks are small tanh MLPs with a linear output layer. The encoder
//! and codebook are shared by every node of an ensemble; each node owns a
//! decoder for quantized features and a decoder for raw samples.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{cross_entropy, softmax, squared_distance, ProbVector, RngStream, Tensor};
use crate::vq::{Codebook, QuantizedFeatures};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"EEM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Fully connected network, tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("input is always recorded")
    }
}

/// Gradient buffers shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn clear(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("MLP layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.shape().len() != 2 || layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(
                    format!("layer {i}: bias of length {}", layer.output_dim()),
                    layer.bias.len(),
                ));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidParameter(format!("layer {i}: non-finite bias")));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::shape(
                    format!("layer {i} input {}", layers[i - 1].output_dim()),
                    layer.input_dim(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        Self::build(dims, |fan_in, fan_out| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.uniform_range(-bound, bound)
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::build(dims, |_, _| 0.0)
    }

    fn build(dims: &[usize], mut init: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "MLP needs input and output sizes, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let data = (0..fan_in * fan_out).map(|_| init(fan_in, fan_out)).collect();
                Ok(Layer {
                    weights: Tensor::matrix(fan_out, fan_in, data)?,
                    bias: vec![0.0; fan_out],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.len()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.weights.matvec(activations.last().unwrap());
            for (v, b) in h.iter_mut().zip(&layer.bias) {
                *v += b;
                if i != last {
                    *v = v.tanh();
                }
            }
            activations.push(h);
        }
        Ok(ForwardCache { activations })
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.activations[i];
            let (gw, gb) = &mut grads.layers[i];
            let cols = layer.input_dim();
            for (r, &d) in delta.iter().enumerate() {
                gb[r] += d;
                for (g, &a) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            let mut grad_in = layer.weights.matvec_transposed(&delta);
            if i > 0 {
                for (g, &a) in grad_in.iter_mut().zip(input) {
                    *g *= 1.0 - a * a;
                }
            }
            delta = grad_in;
        }
        delta
    }

    /// `θ ← θ − lr · scale · g`
    pub fn step(&mut self, grads: &MlpGrads, lr: f64, scale: f64) -> Result<()> {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.update(|i, v| v - lr * scale * gw[i])?;
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * scale * g;
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidParameter("training diverged".into()));
            }
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let nw = l.weights.len();
            let nb = l.bias.len();
            layers.push(Layer {
                weights: Tensor::matrix(l.output_dim(), l.input_dim(), flat[offset..offset + nw].to_vec())?,
                bias: flat[offset + nw..offset + nw + nb].to_vec(),
            });
            offset += nw + nb;
        }
        MlpParams::new(layers)
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.data().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r.error("zero layers"));
        }
        let dims = (0..count)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count);
        for (fan_in, fan_out) in dims {
            let w = r.f64s(fan_in * fan_out)?;
            let b = r.f64s(fan_out)?;
            layers.push(Layer {
                weights: Tensor::matrix(fan_out, fan_in, w)?,
                bias: b,
            });
        }
        MlpParams::new(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        self.write_body(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let mlp = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(mlp)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn error(&self, reason: &str) -> Error {
        Error::Format {
            path: PathBuf::new(),
            reason: format!("{reason} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.error("bad magic"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(self.error("unexpected end of data"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

/// Softmax of the decoder output.
pub fn decode(decoder: &MlpParams, input: &[f64]) -> Result<ProbVector> {
    softmax(&decoder.forward(input)?)
}

/// Encoder network plus the codebook it feeds; shared by all nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEncoder {
    pub encoder: MlpParams,
    pub codebook: Codebook,
}

impl SharedEncoder {
    pub fn new(encoder: MlpParams, codebook: Codebook) -> Result<Self> {
        if encoder.output_dim() != codebook.feature_len() {
            return Err(Error::shape(
                format!("encoder output m*d = {}", codebook.feature_len()),
                encoder.output_dim(),
            ));
        }
        Ok(SharedEncoder { encoder, codebook })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Continuous encoder output, shaped `m × d`.
    pub fn features(&self, x: &[f64]) -> Result<Tensor> {
        let out = self.encoder.forward(x)?;
        Tensor::matrix(self.codebook.subvectors(), self.codebook.dim(), out)
    }

    /// Quantized features of `x`.
    pub fn encode(&self, x: &[f64]) -> Result<QuantizedFeatures> {
        self.codebook.quantize_flat(&self.encoder.forward(x)?)
    }
}

/// Free-standing form of [`SharedEncoder::encode`].
pub fn encode(shared: &SharedEncoder, x: &[f64]) -> Result<QuantizedFeatures> {
    shared.encode(x)
}

/// One edge device.
#[derive(Debug, Clone)]
pub struct NodeModel {
    pub node_id: usize,
    pub shared: Arc<SharedEncoder>,
    pub decoder_raw: MlpParams,
    pub decoder_quant: MlpParams,
    /// Validation accuracy of `decoder_raw` applied to raw samples.
    pub val_acc_raw: f64,
    /// Validation accuracy of `decoder_quant` behind the shared encoder and quantizer.
    pub val_acc_quant: f64,
}

impl NodeModel {
    pub fn new(
        node_id: usize,
        shared: Arc<SharedEncoder>,
        decoder_raw: MlpParams,
        decoder_quant: MlpParams,
    ) -> Result<Self> {
        if decoder_quant.input_dim() != shared.codebook.feature_len() {
            return Err(Error::shape(shared.codebook.feature_len(), decoder_quant.input_dim()));
        }
        if decoder_raw.input_dim() != shared.input_dim() {
            return Err(Error::shape(shared.input_dim(), decoder_raw.input_dim()));
        }
        if decoder_raw.output_dim() != decoder_quant.output_dim() {
            return Err(Error::shape(decoder_quant.output_dim(), decoder_raw.output_dim()));
        }
        Ok(NodeModel {
            node_id,
            shared,
            decoder_raw,
            decoder_quant,
            val_acc_raw: 0.0,
            val_acc_quant: 0.0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.decoder_quant.output_dim()
    }

    pub fn predict_quant(&self, x: &[f64]) -> Result<usize> {
        let z = self.shared.encode(x)?;
        Ok(decode(&self.decoder_quant, z.dequantized.data())?.argmax())
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<usize> {
        Ok(decode(&self.decoder_raw, x)?.argmax())
    }

    /// Node file: magic, node id, both validation accuracies, then the raw
    /// and quantized decoders.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&(self.node_id as u32).to_le_bytes());
        out.extend_from_slice(&self.val_acc_raw.to_le_bytes());
        out.extend_from_slice(&self.val_acc_quant.to_le_bytes());
        self.decoder_raw.write_body(&mut out);
        self.decoder_quant.write_body(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8], shared: Arc<SharedEncoder>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let node_id = r.u32()? as usize;
        let val_acc_raw = r.f64()?;
        let val_acc_quant = r.f64()?;
        let decoder_raw = MlpParams::read_body(&mut r)?;
        let decoder_quant = MlpParams::read_body(&mut r)?;
        r.finish()?;
        let mut node = NodeModel::new(node_id, shared, decoder_raw, decoder_quant)?;
        node.val_acc_raw = val_acc_raw;
        node.val_acc_quant = val_acc_quant;
        Ok(node)
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        if let Some(&(_, label)) = samples.iter().find(|(_, l)| *l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        if let Some((x, _)) = samples.first() {
            if samples.iter().any(|(y, _)| y.len() != x.len()) {
                return Err(Error::InvalidParameter("samples differ in dimension".into()));
            }
        }
        Ok(Dataset { samples, n_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |(x, _)| x.len())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Gaussian-mixture classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub classes: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    /// Standard deviation of the cluster centers around the origin.
    pub separation: f64,
    pub noise: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            classes: 4,
            dim: 16,
            clusters_per_class: 16,
            separation: 1.5,
            noise: 1.0,
            train: 1000,
            validation: 400,
            test: 400,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("synthetic task: {m}")));
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if self.dim == 0 || self.clusters_per_class == 0 {
            return bad("dim and clusters_per_class must be positive");
        }
        if !(self.separation.is_finite() && self.separation > 0.0 && self.noise.is_finite() && self.noise >= 0.0) {
            return bad("separation must be > 0 and noise >= 0");
        }
        if self.train < self.classes || self.validation < self.classes || self.test < self.classes {
            return bad("every split needs at least one sample per class");
        }
        Ok(())
    }

    /// Labels cycle through the classes so every split contains each class.
    pub fn generate(&self, seed: u64) -> Result<Splits> {
        self.validate()?;
        let mut rng = RngStream::new(seed);
        let centers: Vec<Vec<f64>> = (0..self.classes * self.clusters_per_class)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.separation * rng.standard_normal())
                    .collect()
            })
            .collect();
        let mut split = |n: usize| {
            let samples = (0..n)
                .map(|i| {
                    let label = i % self.classes;
                    let cluster = label * self.clusters_per_class + rng.index(self.clusters_per_class);
                    let x = centers[cluster]
                        .iter()
                        .map(|c| c + self.noise * rng.standard_normal())
                        .collect();
                    (x, label)
                })
                .collect();
            Dataset::new(samples, self.classes)
        };
        Ok(Splits {
            train: split(self.train)?,
            validation: split(self.validation)?,
            test: split(self.test)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum Diversity {
    RandomInit,
    /// Every node sees a shared pool plus a private shard. Missing sizes
    /// keep a 34:1 shared-to-private ratio per node.
    Bagging {
        #[serde(default)]
        shared: Option<usize>,
        #[serde(default)]
        private_per_node: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub nodes: usize,
    pub diversity: Diversity,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    /// Encoder hidden width; 0 makes the encoder a single linear layer.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Sub-vectors per feature tensor (`m`).
    pub subvectors: usize,
    /// Codeword dimension (`d`).
    pub subvector_dim: usize,
    /// Codebook size (`P`), a power of two.
    pub codebook_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            nodes: 16,
            diversity: Diversity::RandomInit,
            epochs: 80,
            batch_size: 32,
            learning_rate: 0.05,
            beta: crate::vq::DEFAULT_BETA,
            encoder_hidden: 0,
            decoder_hidden: 32,
            subvectors: 16,
            subvector_dim: 1,
            codebook_size: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("training: {m}")));
        if self.nodes == 0 {
            return bad("nodes must be >= 1".into());
        }
        if self.batch_size == 0 || self.decoder_hidden == 0 {
            return bad("batch_size and decoder_hidden must be positive".into());
        }
        if self.subvectors == 0 || self.subvector_dim == 0 {
            return bad("subvectors and subvector_dim must be positive".into());
        }
        if !self.codebook_size.is_power_of_two() {
            return bad(format!("codebook_size {} is not a power of two", self.codebook_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be >= 0".into());
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.subvectors * self.subvector_dim
    }
}

/// Training-sample indices for each node.
pub fn node_training_sets(
    n_train: usize,
    nodes: usize,
    diversity: Diversity,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    match diversity {
        Diversity::RandomInit => Ok(vec![(0..n_train).collect(); nodes]),
        Diversity::Bagging {
            shared,
            private_per_node,
        } => {
            let (shared, private) = match (shared, private_per_node) {
                (Some(s), Some(p)) => (s, p),
                (Some(s), None) => (s, n_train.saturating_sub(s) / nodes),
                (None, Some(p)) => (n_train.saturating_sub(nodes * p), p),
                (None, None) => {
                    let p = n_train / (34 + nodes);
                    (34 * p, p)
                }
            };
            if shared + nodes * private > n_train {
                return Err(Error::InvalidParameter(format!(
                    "bagging needs {} samples, training set has {n_train}",
                    shared + nodes * private
                )));
            }
            let mut order: Vec<usize> = (0..n_train).collect();
            rng.shuffle(&mut order);
            let pool = &order[..shared];
            Ok((0..nodes)
                .map(|j| {
                    let start = shared + j * private;
                    let mut set: Vec<usize> = pool.iter().chain(&order[start..start + private]).copied().collect();
                    set.sort_unstable();
                    set
                })
                .collect())
        }
    }
}

/// Output of [`train_ensemble`].
#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    pub shared: Arc<SharedEncoder>,
    pub nodes: Vec<NodeModel>,
    /// Per node: total quantized-path loss on its training set before
    /// training (entry 0) and after each epoch.
    pub loss_history: Vec<Vec<f64>>,
    /// Per node: raw-path cross-entropy, same layout.
    pub raw_loss_history: Vec<Vec<f64>>,
    pub training_sets: Vec<Vec<usize>>,
}

/// Quantized-path loss pieces for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub vq: f64,
    pub commit: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.task + self.vq + self.commit
    }
}

fn one_hot_residual(probs: &ProbVector, label: usize) -> Vec<f64> {
    let mut g = probs.probs().to_vec();
    g[label] -= 1.0;
    g
}

/// Gradients of the quantized-path loss for a single sample.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub loss: LossParts,
    pub encoder: MlpGrads,
    /// Flattened `P × d`.
    pub codebook: Vec<f64>,
    pub decoder: MlpGrads,
}

/// Encoder → quantizer → decoder loss and its gradients for one sample,
/// using the straight-through estimator for the encoder and the VQ term
/// for the codebook.
pub fn quantized_path_grads(
    shared: &SharedEncoder,
    decoder: &MlpParams,
    x: &[f64],
    label: usize,
    beta: f64,
) -> Result<SampleGrads> {
    let mut encoder = shared.encoder.zero_grads();
    let mut dec = decoder.zero_grads();
    let mut codebook = vec![0.0; shared.codebook.vectors().len()];
    let enc_cache = shared.encoder.forward_cached(x)?;
    let xe = enc_cache.output();
    let q = shared.codebook.quantize_flat(xe)?;
    let z = q.dequantized.data();
    let dec_cache = decoder.forward_cached(z)?;
    let probs = softmax(dec_cache.output())?;
    let task = cross_entropy(&probs, label)?;
    let grad_z = decoder.backward(&dec_cache, &one_hot_residual(&probs, label), &mut dec);
    let sq = squared_distance(xe, z);
    let mut grad_xe = grad_z;
    accumulate_quantizer_grads(&shared.codebook, xe, &q, beta, &mut grad_xe, &mut codebook);
    shared.encoder.backward(&enc_cache, &grad_xe, &mut encoder);
    Ok(SampleGrads {
        loss: LossParts {
            task,
            vq: sq,
            commit: beta * sq,
        },
        encoder,
        codebook,
        decoder: dec,
    })
}

/// Adds the commitment gradient `2β(x − z)` to `grad_xe` (which already
/// holds the straight-through task gradient) and the VQ gradient
/// `2(z − x)` to the assigned codewords.
fn accumulate_quantizer_grads(
    codebook: &Codebook,
    xe: &[f64],
    q: &QuantizedFeatures,
    beta: f64,
    grad_xe: &mut [f64],
    grad_codebook: &mut [f64],
) {
    let d = codebook.dim();
    let z = q.dequantized.data();
    for (row, &idx) in q.indices.iter().enumerate() {
        for k in 0..d {
            let diff = xe[row * d + k] - z[row * d + k];
            grad_xe[row * d + k] += 2.0 * beta * diff;
            grad_codebook[idx * d + k] -= 2.0 * diff;
        }
    }
}

fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Trains a shared encoder/codebook and `cfg.nodes` decoder pairs.
///
/// Every node walks its own training set in its own shuffled order. At
/// step `s` each node takes batch `s` of that order and updates both of its
/// decoders; the encoder and codebook take one step on the gradient summed
/// over all nodes' batches, divided by the number of samples.
pub fn train_ensemble(
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainingConfig,
    rng: &RngStream,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let n_classes = train.n_classes;
    let input_dim = train.dim();
    let sets = node_training_sets(train.len(), cfg.nodes, cfg.diversity, &mut rng.derive(3))?;
    for (node, set) in sets.iter().enumerate() {
        let mut seen = vec![false; n_classes];
        for &i in set {
            seen[train.samples[i].1] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::DegenerateShard { node, class });
        }
    }

    let encoder_dims = match cfg.encoder_hidden {
        0 => vec![input_dim, cfg.feature_len()],
        h => vec![input_dim, h, cfg.feature_len()],
    };
    let encoder = MlpParams::random(&encoder_dims, &mut rng.derive(0))?;
    let codebook = Codebook::random(cfg.codebook_size, cfg.subvector_dim, cfg.subvectors, &mut rng.derive(1))?;
    let mut shared = SharedEncoder::new(encoder, codebook)?;
    let mut dec_q = Vec::with_capacity(cfg.nodes);
    let mut dec_r = Vec::with_capacity(cfg.nodes);
    for j in 0..cfg.nodes as u64 {
        dec_q.push(MlpParams::random(
            &[cfg.feature_len(), cfg.decoder_hidden, n_classes],
            &mut rng.derive(1000 + 2 * j),
        )?);
        dec_r.push(MlpParams::random(
            &[input_dim, cfg.decoder_hidden, n_classes],
            &mut rng.derive(1001 + 2 * j),
        )?);
    }

    let mut loss_history = vec![Vec::with_capacity(cfg.epochs + 1); cfg.nodes];
    let mut raw_loss_history = vec![Vec::with_capacity(cfg.epochs + 1); cfg.nodes];
    let record = |shared: &SharedEncoder, dec_q: &[MlpParams], dec_r: &[MlpParams], lh: &mut [Vec<f64>], rh: &mut [Vec<f64>]| -> Result<()> {
        let (q, r) = epoch_losses(shared, dec_q, dec_r, train, &sets, cfg.beta)?;
        for j in 0..cfg.nodes {
            lh[j].push(q[j]);
            rh[j].push(r[j]);
        }
        Ok(())
    };
    record(&shared, &dec_q, &dec_r, &mut loss_history, &mut raw_loss_history)?;

    let mut orders = sets.clone();
    let mut order_rngs: Vec<RngStream> = (0..cfg.nodes as u64).map(|j| rng.derive(2000 + j)).collect();
    let steps = sets.iter().map(Vec::len).max().unwrap_or(0).div_ceil(cfg.batch_size);
    let mut enc_grads = shared.encoder.zero_grads();
    let mut cb_grads = vec![0.0; shared.codebook.vectors().len()];
    let mut q_grads: Vec<MlpGrads> = dec_q.iter().map(MlpParams::zero_grads).collect();
    let mut r_grads: Vec<MlpGrads> = dec_r.iter().map(MlpParams::zero_grads).collect();
    let mut grad_xe = vec![0.0; cfg.feature_len()];
    for _ in 0..cfg.epochs {
        for (order, r) in orders.iter_mut().zip(&mut order_rngs) {
            r.shuffle(order);
        }
        for step in 0..steps {
            enc_grads.clear();
            cb_grads.iter_mut().for_each(|g| *g = 0.0);
            let mut processed = 0usize;
            for j in 0..cfg.nodes {
                let order = &orders[j];
                let lo = (step * cfg.batch_size).min(order.len());
                let hi = ((step + 1) * cfg.batch_size).min(order.len());
                if lo == hi {
                    continue;
                }
                q_grads[j].clear();
                r_grads[j].clear();
                for &s in &order[lo..hi] {
                    let (x, label) = &train.samples[s];
                    let enc_cache = shared.encoder.forward_cached(x)?;
                    let xe = enc_cache.output();
                    let q = shared.codebook.quantize_flat(xe)?;
                    let cache = dec_q[j].forward_cached(q.dequantized.data())?;
                    let probs = softmax(cache.output())?;
                    let gz = dec_q[j].backward(&cache, &one_hot_residual(&probs, *label), &mut q_grads[j]);
                    grad_xe.copy_from_slice(&gz);
                    accumulate_quantizer_grads(&shared.codebook, xe, &q, cfg.beta, &mut grad_xe, &mut cb_grads);
                    shared.encoder.backward(&enc_cache, &grad_xe, &mut enc_grads);

                    let cache = dec_r[j].forward_cached(x)?;
                    let probs = softmax(cache.output())?;
                    dec_r[j].backward(&cache, &one_hot_residual(&probs, *label), &mut r_grads[j]);
                }
                let scale = 1.0 / (hi - lo) as f64;
                dec_q[j].step(&q_grads[j], cfg.learning_rate, scale)?;
                dec_r[j].step(&r_grads[j], cfg.learning_rate, scale)?;
                processed += hi - lo;
            }
            let scale = 1.0 / processed as f64;
            shared.encoder.step(&enc_grads, cfg.learning_rate, scale)?;
            shared.codebook.step(
                &cb_grads.iter().map(|g| g * scale).collect::<Vec<_>>(),
                cfg.learning_rate,
            )?;
        }
        record(&shared, &dec_q, &dec_r, &mut loss_history, &mut raw_loss_history)?;
    }

    let shared = Arc::new(shared);
    let val_z = validation
        .samples
        .iter()
        .map(|(x, _)| shared.encode(x))
        .collect::<Result<Vec<_>>>()?;
    let mut nodes = Vec::with_capacity(cfg.nodes);
    for (j, (dq, dr)) in dec_q.into_iter().zip(dec_r).enumerate() {
        let mut node = NodeModel::new(j, Arc::clone(&shared), dr, dq)?;
        let mut raw_ok = 0;
        let mut quant_ok = 0;
        for ((x, label), z) in validation.samples.iter().zip(&val_z) {
            raw_ok += usize::from(decode(&node.decoder_raw, x)?.argmax() == *label);
            quant_ok += usize::from(decode(&node.decoder_quant, z.dequantized.data())?.argmax() == *label);
        }
        node.val_acc_raw = accuracy(raw_ok, validation.len());
        node.val_acc_quant = accuracy(quant_ok, validation.len());
        nodes.push(node);
    }
    Ok(TrainedEnsemble {
        shared,
        nodes,
        loss_history,
        raw_loss_history,
        training_sets: sets,
    })
}

/// Mean quantized-path total loss and raw-path cross-entropy per node.
fn epoch_losses(
    shared: &SharedEncoder,
    dec_q: &[MlpParams],
    dec_r: &[MlpParams],
    train: &Dataset,
    sets: &[Vec<usize>],
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let encoded = train
        .samples
        .iter()
        .map(|(x, _)| {
            let xe = shared.encoder.forward(x)?;
            let q = shared.codebook.quantize_flat(&xe)?;
            let sq = squared_distance(&xe, q.dequantized.data());
            Ok((q, sq))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut quant = Vec::with_capacity(sets.len());
    let mut raw = Vec::with_capacity(sets.len());
    for (j, set) in sets.iter().enumerate() {
        let mut lq = 0.0;
        let mut lr = 0.0;
        for &i in set {
            let (x, label) = &train.samples[i];
            let (q, sq) = &encoded[i];
            lq += cross_entropy(&decode(&dec_q[j], q.dequantized.data())?, *label)? + (1.0 + beta) * sq;
            lr += cross_entropy(&decode(&dec_r[j], x)?, *label)?;
        }
        quant.push(lq / set.len() as f64);
        raw.push(lr / set.len() as f64);
    }
    Ok((quant, raw))
}

/// Which parameters [`grad_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPath {
    /// Quantized-path decoder parameters.
    Decoder,
    /// Encoder parameters (straight-through) and codebook entries.
    Encoder,
}

/// Minimum distance to a quantization boundary for a sample to be used by
/// the encoder-path check.
pub const BOUNDARY_MARGIN: f64 = 1e-3;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between analytic and numeric derivatives; differences
/// between two values both below `1e-7` in magnitude count as absolute.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Samples of `batch` whose encoder output stays at least
/// [`BOUNDARY_MARGIN`] away from every quantization boundary.
pub fn boundary_safe(shared: &SharedEncoder, batch: &[(Vec<f64>, usize)]) -> Result<Vec<(Vec<f64>, usize)>> {
    let d = shared.codebook.dim();
    let mut keep = Vec::new();
    for (x, label) in batch {
        let xe = shared.encoder.forward(x)?;
        if xe.chunks(d).all(|row| shared.codebook.boundary_margin(row) >= BOUNDARY_MARGIN) {
            keep.push((x.clone(), *label));
        }
    }
    Ok(keep)
}

/// Largest relative error between the analytic gradients used in training
/// and central finite differences, averaged over `batch`.
///
/// The decoder check differentiates the true batch loss. The encoder check
/// differentiates the surrogate in which the quantizer acts as identity
/// around the dequantized point, `CE(dec(x_e(θ) − x_e(θ₀) + z₀)) +
/// β‖x_e(θ) − Q(x_e(θ))‖²`, and the VQ loss with respect to the codebook.
/// Samples near a quantization boundary are dropped from the encoder check.
pub fn grad_check(
    shared: &SharedEncoder,
    decoder: &MlpParams,
    batch: &[(Vec<f64>, usize)],
    beta: f64,
    path: GradPath,
) -> Result<f64> {
    let batch = match path {
        GradPath::Decoder => batch.to_vec(),
        GradPath::Encoder => boundary_safe(shared, batch)?,
    };
    if batch.is_empty() {
        return Err(Error::Empty("grad-check batch"));
    }
    let n = batch.len() as f64;
    let mut enc = vec![0.0; shared.encoder.param_count()];
    let mut dec = vec![0.0; decoder.param_count()];
    let mut cb = vec![0.0; shared.codebook.vectors().len()];
    for (x, label) in &batch {
        let g = quantized_path_grads(shared, decoder, x, *label, beta)?;
        for (a, b) in enc.iter_mut().zip(g.encoder.flat()) {
            *a += b / n;
        }
        for (a, b) in dec.iter_mut().zip(g.decoder.flat()) {
            *a += b / n;
        }
        for (a, b) in cb.iter_mut().zip(&g.codebook) {
            *a += b / n;
        }
    }

    let mut worst = 0.0f64;
    match path {
        GradPath::Decoder => {
            let inputs = batch
                .iter()
                .map(|(x, l)| Ok((shared.encode(x)?.dequantized.into_data(), *l)))
                .collect::<Result<Vec<_>>>()?;
            let loss = |flat: &[f64]| -> Result<f64> {
                let d = decoder.with_flat_params(flat)?;
                let mut total = 0.0;
                for (z, l) in &inputs {
                    total += cross_entropy(&decode(&d, z)?, *l)?;
                }
                Ok(total / n)
            };
            let base = decoder.flat_params();
            for (i, &analytic) in dec.iter().enumerate() {
                worst = worst.max(relative_error(analytic, central_difference(&base, i, &loss)?));
            }
        }
        GradPath::Encoder => {
            let anchors = batch
                .iter()
                .map(|(x, _)| {
                    let xe = shared.encoder.forward(x)?;
                    let z = shared.codebook.quantize_flat(&xe)?.dequantized.into_data();
                    Ok((xe, z))
                })
                .collect::<Result<Vec<_>>>()?;
            let surrogate = |flat: &[f64]| -> Result<f64> {
                let e = shared.encoder.with_flat_params(flat)?;
                let mut total = 0.0;
                for ((x, l), (xe0, z0)) in batch.iter().zip(&anchors) {
                    let xe = e.forward(x)?;
                    let shifted: Vec<f64> = xe.iter().zip(xe0).zip(z0).map(|((a, b), c)| a - b + c).collect();
                    total += cross_entropy(&decode(decoder, &shifted)?, *l)?;
                    let z = shared.codebook.quantize_flat(&xe)?;
                    total += beta * squared_distance(&xe, z.dequantized.data());
                }
                Ok(total / n)
            };
            let base = shared.encoder.flat_params();
            for (i, &analytic) in enc.iter().enumerate() {
                worst = worst.max(relative_error(analytic, central_difference(&base, i, &surrogate)?));
            }
            let vq = |flat: &[f64]| -> Result<f64> {
                let book = Codebook::new(
                    Tensor::matrix(shared.codebook.size(), shared.codebook.dim(), flat.to_vec())?,
                    shared.codebook.subvectors(),
                )?;
                let mut total = 0.0;
                for (xe0, _) in &anchors {
                    let z = book.quantize_flat(xe0)?;
                    total += squared_distance(xe0, z.dequantized.data());
                }
                Ok(total / n)
            };
            let base = shared.codebook.vectors().data().to_vec();
            for (i, &analytic) in cb.iter().enumerate() {
                worst = worst.max(relative_error(analytic, central_difference(&base, i, &vq)?));
            }
        }
    }
    Ok(worst)
}

fn central_difference(base: &[f64], i: usize, f: &impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut p = base.to_vec();
    p[i] = base[i] + FD_STEP;
    let up = f(&p)?;
    p[i] = base[i] - FD_STEP;
    let down = f(&p)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

const ENCODER_FILE: &str = "encoder.eem";
const CODEBOOK_FILE: &str = "codebook.eeq";

fn node_file(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("node_{j:03}.eem"))
}

/// Writes `encoder.eem`, `codebook.eeq` and one `node_NNN.eem` per node.
pub fn save_ensemble(dir: &Path, shared: &SharedEncoder, nodes: &[NodeModel]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |path: PathBuf, bytes: Vec<u8>| std::fs::write(&path, bytes).map_err(|e| Error::io(path, e));
    write(dir.join(ENCODER_FILE), shared.encoder.to_bytes())?;
    shared.codebook.save(&dir.join(CODEBOOK_FILE))?;
    for node in nodes {
        write(node_file(dir, node.node_id), node.to_bytes())?;
    }
    Ok(())
}

/// Loads an ensemble written by [`save_ensemble`]; node files are read in
/// id order until the first gap.
pub fn load_ensemble(dir: &Path) -> Result<(Arc<SharedEncoder>, Vec<NodeModel>)> {
    let required = [dir.join(ENCODER_FILE), dir.join(CODEBOOK_FILE), node_file(dir, 0)];
    let missing: Vec<PathBuf> = required.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let read = |path: &Path| std::fs::read(path).map_err(|e| Error::io(path, e));
    let encoder = MlpParams::from_bytes(&read(&required[0])?).map_err(|e| with_path(&required[0], e))?;
    let codebook = Codebook::load(&required[1])?;
    let shared = Arc::new(SharedEncoder::new(encoder, codebook)?);
    let mut nodes = Vec::new();
    loop {
        let path = node_file(dir, nodes.len());
        if !path.is_file() {
            break;
        }
        let node = NodeModel::from_bytes(&read(&path)?, Arc::clone(&shared)).map_err(|e| with_path(&path, e))?;
        if node.node_id != nodes.len() {
            return Err(Error::Format {
                path,
                reason: format!("embedded node id {} does not match file name", node.node_id),
            });
        }
        nodes.push(node);
    }
    Ok((shared, nodes))
}
