//! Layered inference graph, forward evaluation under a step vector, and the
//! calibration loss `L(Δ₁, …, Δₙ)`.

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{bias_correct, BiasCorrection, CHANNEL_AXIS};
use crate::error::{Error, Result};
use crate::qtn;
use crate::quantizer::{check_bits, quantize, QuantParams};
use crate::steps::{Slot, SlotKind, StepLayout, StepVector};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Avgpool,
    Flatten,
    ResidualAdd,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }
}

fn default_true() -> bool {
    true
}

/// One entry of the `layers` array in a model manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    /// Window side for `avgpool`; defaults to 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(default = "default_true")]
    pub quantize_weights: bool,
    #[serde(default = "default_true")]
    pub quantize_activations: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelManifest {
    /// Parses and structurally validates a manifest without touching any
    /// tensor files.
    pub fn parse(json: &str) -> Result<Self> {
        let m: ModelManifest =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Model("num_classes must be at least 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let weighted = l.kind.has_weights();
            if weighted && l.weight_file.is_none() {
                return Err(Error::Model(format!("layer {i} ({:?}) needs weight_file", l.kind)));
            }
            if !weighted && (l.weight_file.is_some() || l.bias_file.is_some()) {
                return Err(Error::Model(format!("layer {i} ({:?}) cannot carry tensors", l.kind)));
            }
            match (l.kind, l.residual_from) {
                (LayerKind::ResidualAdd, Some(from)) if from < i => {}
                (LayerKind::ResidualAdd, Some(from)) => {
                    return Err(Error::Model(format!(
                        "layer {i} adds the output of layer {from}, which is not earlier"
                    )))
                }
                (LayerKind::ResidualAdd, None) => {
                    return Err(Error::Model(format!("layer {i} needs residual_from")))
                }
                (_, Some(_)) => {
                    return Err(Error::Model(format!(
                        "layer {i} ({:?}) cannot have residual_from",
                        l.kind
                    )))
                }
                _ => {}
            }
            if l.stride == Some(0) || l.pool == Some(0) {
                return Err(Error::Model(format!("layer {i}: stride and pool must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub pool: usize,
    pub quantize_weights: bool,
    pub quantize_activations: bool,
    pub residual_from: Option<usize>,
}

impl Layer {
    fn bare(kind: LayerKind) -> Self {
        Layer {
            kind,
            weights: None,
            bias: None,
            stride: 1,
            pad: 0,
            pool: 2,
            quantize_weights: kind.has_weights(),
            quantize_activations: kind == LayerKind::Relu,
            residual_from: None,
        }
    }

    pub fn dense(weights: Tensor, bias: Option<Tensor>) -> Self {
        Layer {
            weights: Some(weights),
            bias,
            ..Layer::bare(LayerKind::Dense)
        }
    }

    pub fn conv2d(weights: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Layer {
            weights: Some(weights),
            bias,
            stride,
            pad,
            ..Layer::bare(LayerKind::Conv2d)
        }
    }

    pub fn relu() -> Self {
        Layer::bare(LayerKind::Relu)
    }

    pub fn avgpool(pool: usize) -> Self {
        Layer {
            pool,
            ..Layer::bare(LayerKind::Avgpool)
        }
    }

    pub fn flatten() -> Self {
        Layer::bare(LayerKind::Flatten)
    }

    pub fn residual_add(from: usize) -> Self {
        Layer {
            residual_from: Some(from),
            ..Layer::bare(LayerKind::ResidualAdd)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    layers: Vec<Layer>,
    num_classes: usize,
}

impl Model {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let model = Model {
            name: name.into(),
            layers,
            num_classes,
        };
        // the manifest view carries every structural rule
        model.manifest_skeleton().validate()?;
        for (i, l) in model.layers.iter().enumerate() {
            if let Some(w) = &l.weights {
                let want = if l.kind == LayerKind::Dense { 2 } else { 4 };
                if w.rank() != want {
                    return Err(Error::Model(format!(
                        "layer {i}: weight rank {} (expected {want})",
                        w.rank()
                    )));
                }
                if let Some(b) = &l.bias {
                    if b.len() != w.shape()[0] {
                        return Err(Error::Model(format!(
                            "layer {i}: bias length {} for {} output channels",
                            b.len(),
                            w.shape()[0]
                        )));
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_weights())
            .collect()
    }

    fn manifest_skeleton(&self) -> ModelManifest {
        ModelManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerSpec {
                    kind: l.kind,
                    weight_file: l.weights.as_ref().map(|_| format!("layer{i}_w.qtn")),
                    bias_file: l.bias.as_ref().map(|_| format!("layer{i}_b.qtn")),
                    stride: l.kind.eq(&LayerKind::Conv2d).then_some(l.stride),
                    pad: l.kind.eq(&LayerKind::Conv2d).then_some(l.pad),
                    pool: l.kind.eq(&LayerKind::Avgpool).then_some(l.pool),
                    quantize_weights: l.quantize_weights,
                    quantize_activations: l.quantize_activations,
                    residual_from: l.residual_from,
                })
                .collect(),
        }
    }

    pub fn from_manifest(manifest: &ModelManifest, base_dir: &Path) -> Result<Self> {
        manifest.validate()?;
        let load = |f: &Option<String>| -> Result<Option<Tensor>> {
            f.as_ref().map(|name| qtn::read(base_dir.join(name))).transpose()
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for spec in &manifest.layers {
            layers.push(Layer {
                kind: spec.kind,
                weights: load(&spec.weight_file)?,
                bias: load(&spec.bias_file)?,
                stride: spec.stride.unwrap_or(1),
                pad: spec.pad.unwrap_or(0),
                pool: spec.pool.unwrap_or(2),
                quantize_weights: spec.quantize_weights,
                quantize_activations: spec.quantize_activations,
                residual_from: spec.residual_from,
            });
        }
        Model::new(manifest.name.clone(), layers, manifest.num_classes)
    }

    /// Loads a JSON manifest; tensor paths are relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = ModelManifest::parse(&text)
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Model::from_manifest(&manifest, &base)
    }

    /// Writes `model.json` plus one `.qtn` per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest_skeleton();
        for (l, spec) in self.layers.iter().zip(&manifest.layers) {
            if let (Some(w), Some(f)) = (&l.weights, &spec.weight_file) {
                qtn::write(dir.join(f), w)?;
            }
            if let (Some(b), Some(f)) = (&l.bias, &spec.bias_file) {
                qtn::write(dir.join(f), b)?;
            }
        }
        let path = dir.join("model.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        Model::new(self.name.clone(), layers, self.num_classes)
    }
}

/// Which tensors are quantized and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// `None` leaves weights at full precision.
    pub weight_bits: Option<u8>,
    /// `None` leaves activations at full precision.
    pub act_bits: Option<u8>,
    /// Keep the first and last weight layers at full precision.
    pub skip_first_last: bool,
    pub bias_correction: BiasCorrection,
}

impl QuantConfig {
    pub fn new(weight_bits: Option<u8>, act_bits: Option<u8>) -> Self {
        QuantConfig {
            weight_bits,
            act_bits,
            skip_first_last: true,
            bias_correction: BiasCorrection::None,
        }
    }

    pub fn full_precision() -> Self {
        QuantConfig::new(None, None)
    }
}

/// A model together with the quantization configuration that defines its
/// step-vector layout.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    model: Arc<Model>,
    config: QuantConfig,
    layout: StepLayout,
}

impl QuantizedModel {
    pub fn new(model: Arc<Model>, config: QuantConfig) -> Result<Self> {
        if let Some(b) = config.weight_bits {
            check_bits(b)?;
        }
        if let Some(b) = config.act_bits {
            check_bits(b)?;
        }
        let weight_layers = model.weight_layers();
        let skipped = |i: usize| {
            config.skip_first_last
                && (weight_layers.first() == Some(&i) || weight_layers.last() == Some(&i))
        };
        let mut slots = Vec::new();
        if let Some(bits) = config.weight_bits {
            for &i in &weight_layers {
                if model.layers[i].quantize_weights && !skipped(i) {
                    slots.push(Slot {
                        layer: i,
                        kind: SlotKind::Weight,
                        bits,
                    });
                }
            }
        }
        if let Some(bits) = config.act_bits {
            for (i, l) in model.layers.iter().enumerate() {
                if l.kind == LayerKind::Relu && l.quantize_activations {
                    slots.push(Slot {
                        layer: i,
                        kind: SlotKind::Activation,
                        bits,
                    });
                }
            }
        }
        Ok(QuantizedModel {
            model,
            config,
            layout: StepLayout::new(slots)?,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn shared_model(&self) -> Arc<Model> {
        Arc::clone(&self.model)
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn layout(&self) -> &StepLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn with_bias_correction(&self, mode: BiasCorrection) -> Self {
        QuantizedModel {
            config: QuantConfig {
                bias_correction: mode,
                ..self.config
            },
            ..self.clone()
        }
    }

    /// Quantized (and optionally bias-corrected) weights per layer, and the
    /// activation quantizer per layer.
    fn prepare(&self, steps: &StepVector) -> Result<Prepared<'_>> {
        let params = self.layout.params(steps)?;
        let n = self.model.layers.len();
        let mut weights: Vec<Option<Cow<'_, Tensor>>> = self
            .model
            .layers
            .iter()
            .map(|l| l.weights.as_ref().map(Cow::Borrowed))
            .collect();
        let mut act = vec![None; n];
        for (slot, q) in self.layout.slots().iter().zip(params) {
            match slot.kind {
                SlotKind::Weight => {
                    let w = self.model.layers[slot.layer]
                        .weights
                        .as_ref()
                        .expect("weight slot on weighted layer");
                    let wq = quantize(w, &q);
                    let wq = match self.config.bias_correction {
                        BiasCorrection::None => wq,
                        mode => bias_correct(w, &wq, CHANNEL_AXIS, mode)?,
                    };
                    weights[slot.layer] = Some(Cow::Owned(wq));
                }
                SlotKind::Activation => act[slot.layer] = Some(q),
            }
        }
        Ok(Prepared { weights, act })
    }

    /// Weight tensors exactly as the forward pass uses them.
    pub fn effective_weights(&self, steps: &StepVector) -> Result<Vec<Option<Tensor>>> {
        Ok(self
            .prepare(steps)?
            .weights
            .into_iter()
            .map(|w| w.map(Cow::into_owned))
            .collect())
    }

    fn run(&self, prep: &Prepared<'_>, x: &Tensor, mut taps: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let layers = &self.model.layers;
        let keep: Vec<bool> = (0..layers.len())
            .map(|j| layers.iter().any(|l| l.residual_from == Some(j)))
            .collect();
        let mut saved: Vec<Option<Tensor>> = vec![None; layers.len()];
        let mut cur = Cow::Borrowed(x);
        for (i, l) in layers.iter().enumerate() {
            let next = match l.kind {
                LayerKind::Dense => {
                    let w = prep.weights[i].as_deref().expect("validated");
                    tensor::linear(&cur, w, l.bias.as_ref())?
                }
                LayerKind::Conv2d => {
                    let w = prep.weights[i].as_deref().expect("validated");
                    tensor::conv2d_bias(&cur, w, l.bias.as_ref(), l.stride, l.pad)?
                }
                LayerKind::Relu => {
                    let r = tensor::relu(&cur);
                    if let Some(taps) = taps.as_deref_mut() {
                        if l.quantize_activations {
                            taps.push(r.clone());
                        }
                    }
                    match &prep.act[i] {
                        Some(q) => quantize(&r, q),
                        None => r,
                    }
                }
                LayerKind::Avgpool => tensor::avgpool2d(&cur, l.pool)?,
                LayerKind::Flatten => tensor::flatten(&cur)?,
                LayerKind::ResidualAdd => {
                    let from = l.residual_from.expect("validated");
                    let other = saved[from].as_ref().expect("earlier layer output kept");
                    tensor::add(&cur, other)?
                }
            };
            if keep[i] {
                saved[i] = Some(next.clone());
            }
            cur = Cow::Owned(next);
        }
        let out = cur.into_owned();
        if out.rank() != 2 || out.shape()[1] != self.model.num_classes {
            return Err(Error::Shape(format!(
                "model output {:?} is not [N, {}]",
                out.shape(),
                self.model.num_classes
            )));
        }
        Ok(out)
    }

    /// Logits `[N, num_classes]` for a batch.
    pub fn forward(&self, x: &Tensor, steps: &StepVector) -> Result<Tensor> {
        let prep = self.prepare(steps)?;
        self.run(&prep, x, None)
    }

    /// Full-precision ReLU outputs at every activation quantization point of
    /// this layout, concatenated over the whole input batch.
    pub fn fp_activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let fp = QuantizedModel::new(
            Arc::clone(&self.model),
            QuantConfig {
                weight_bits: None,
                act_bits: None,
                ..self.config
            },
        )?;
        let prep = fp.prepare(&StepVector::default())?;
        let mut taps = Vec::new();
        fp.run(&prep, x, Some(&mut taps))?;
        // taps hold every ReLU with quantize_activations; keep the layout's
        let relus: Vec<usize> = self
            .model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Relu && l.quantize_activations)
            .map(|(i, _)| i)
            .collect();
        let wanted: Vec<usize> = self
            .layout
            .slots()
            .iter()
            .filter(|s| s.kind == SlotKind::Activation)
            .map(|s| s.layer)
            .collect();
        Ok(relus
            .iter()
            .zip(taps)
            .filter(|(l, _)| wanted.contains(l))
            .map(|(_, t)| t)
            .collect())
    }

    /// Per-sample cross-entropy and correctness over a dataset.
    pub fn evaluate(&self, data: &CalibSet, steps: &StepVector) -> Result<Evaluation> {
        if let Some(&bad) = data.labels.iter().find(|&&y| y >= self.model.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.model.num_classes
            )));
        }
        let prep = self.prepare(steps)?;
        let n = data.len();
        let bs = data.batch_size;
        let batches: Vec<Vec<SampleResult>> = (0..n.div_ceil(bs))
            .into_par_iter()
            .map(|b| {
                let (start, end) = (b * bs, ((b + 1) * bs).min(n));
                let logits = self.run(&prep, &data.inputs.slice_batch(start, end)?, None)?;
                Ok((start..end)
                    .enumerate()
                    .map(|(r, idx)| sample_result(logits_row(&logits, r), data.labels[idx]))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let samples: Vec<SampleResult> = batches.into_iter().flatten().collect();
        Ok(Evaluation::from_samples(&samples))
    }

    pub fn loss(&self, data: &CalibSet, steps: &StepVector) -> Result<f64> {
        Ok(self.evaluate(data, steps)?.loss)
    }

    pub fn accuracy(&self, data: &CalibSet, steps: &StepVector) -> Result<f64> {
        Ok(self.evaluate(data, steps)?.accuracy)
    }
}

struct Prepared<'a> {
    weights: Vec<Option<Cow<'a, Tensor>>>,
    act: Vec<Option<QuantParams>>,
}

fn logits_row(logits: &Tensor, r: usize) -> &[f64] {
    let k = logits.shape()[1];
    &logits.data()[r * k..(r + 1) * k]
}

#[derive(Debug, Clone, Copy)]
struct SampleResult {
    loss: f64,
    correct: bool,
}

/// Index of the largest logit; ties go to the lower class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stabilized `logsumexp(z) - z[label]`.
pub fn cross_entropy(row: &[f64], label: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = row.iter().fold(0.0, |acc, &v| acc + (v - m).exp());
    m + s.ln() - row[label]
}

fn sample_result(row: &[f64], label: usize) -> SampleResult {
    SampleResult {
        loss: cross_entropy(row, label),
        correct: argmax(row) == label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

impl Evaluation {
    /// Per-sample losses are summed in ascending value order, which makes
    /// the result independent of sample order, batch size and thread count.
    fn from_samples(samples: &[SampleResult]) -> Self {
        let mut losses: Vec<f64> = samples.iter().map(|s| s.loss).collect();
        losses.sort_by(f64::total_cmp);
        let total = losses.iter().fold(0.0, |acc, &v| acc + v);
        let correct = samples.iter().filter(|s| s.correct).count();
        let n = samples.len() as f64;
        Evaluation {
            loss: total / n,
            accuracy: correct as f64 / n,
            samples: samples.len(),
        }
    }
}

/// Inputs and integer labels used to evaluate the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    inputs: Tensor,
    labels: Vec<usize>,
    batch_size: usize,
}

pub const DEFAULT_BATCH_SIZE: usize = 128;

impl CalibSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, batch_size: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::Shape(format!(
                "inputs must be [N, ...], got {:?}",
                inputs.shape()
            )));
        }
        if inputs.batch_len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.batch_len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(CalibSet {
            inputs,
            labels,
            batch_size,
        })
    }

    /// Builds a set from an input tensor and a label tensor of integral
    /// values.
    pub fn from_tensors(inputs: Tensor, labels: &Tensor, batch_size: usize) -> Result<Self> {
        if labels.rank() != 1 {
            return Err(Error::Shape(format!(
                "labels must be a vector, got {:?}",
                labels.shape()
            )));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidArgument(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CalibSet::new(inputs, labels, batch_size)
    }

    pub fn load(inputs: impl AsRef<Path>, labels: impl AsRef<Path>, batch_size: usize) -> Result<Self> {
        CalibSet::from_tensors(qtn::read(inputs)?, &qtn::read(labels)?, batch_size)
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Result<Self> {
        CalibSet::new(self.inputs.clone(), self.labels.clone(), batch_size)
    }

    /// Samples in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CalibSet::new(self.inputs.select_batch(indices)?, labels, self.batch_size)
    }
}
