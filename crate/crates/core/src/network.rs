//! Fully connected classifier with PReLU activations and inverted dropout,
//! trained by manual backpropagation.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Initial PReLU leakage.
pub const INITIAL_LEAKAGE: f64 = 0.15;

pub const MODEL_FORMAT: &str = "efe-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Prelu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
    /// Probability of keeping a unit during training.
    pub dropout_retention: f64,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation, dropout_retention: f64) -> Self {
        LayerSpec {
            input_width,
            output_width,
            activation,
            dropout_retention,
        }
    }

    /// PReLU hidden layers of the given widths followed by a linear output layer.
    pub fn stack(input_width: usize, hidden: &[usize], num_classes: usize, retention: f64) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut width = input_width;
        for &h in hidden {
            specs.push(LayerSpec::new(width, h, Activation::Prelu, retention));
            width = h;
        }
        specs.push(LayerSpec::new(width, num_classes, Activation::Linear, 1.0));
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `output_width × input_width`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub prelu_leakage: f64,
}

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct NetworkParams {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    revision: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.layers == other.layers
    }
}

/// Gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<Layer>,
}

impl NetworkGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.biases.iter());
        out.push(l.prelu_leakage);
    }
    out
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::ShapeMismatch("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_width == 0 || s.output_width == 0 {
            return Err(Error::ShapeMismatch(format!("layer {i} has zero width")));
        }
        if !(s.dropout_retention > 0.0 && s.dropout_retention <= 1.0) {
            return Err(Error::Domain(format!(
                "layer {i} retention {} outside (0, 1]",
                s.dropout_retention
            )));
        }
        if i > 0 && specs[i - 1].output_width != s.input_width {
            return Err(Error::ShapeMismatch(format!(
                "layer {i} expects {} inputs, previous layer emits {}",
                s.input_width,
                specs[i - 1].output_width
            )));
        }
    }
    Ok(())
}

/// He initialization: weights `~ N(0, 2 / fan_in)`, zero biases, leakage 0.15.
pub fn init_he(specs: &[LayerSpec], seed: u64) -> Result<NetworkParams> {
    validate_specs(specs)?;
    let mut rng = seeds::rng(seed);
    let layers = specs
        .iter()
        .map(|s| {
            let std = (2.0 / s.input_width as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive standard deviation");
            Layer {
                weights: Array2::from_shape_simple_fn((s.output_width, s.input_width), || normal.sample(&mut rng)),
                biases: Array1::zeros(s.output_width),
                prelu_leakage: INITIAL_LEAKAGE,
            }
        })
        .collect();
    Ok(NetworkParams {
        specs: specs.to_vec(),
        layers,
        revision: next_revision(),
    })
}

impl NetworkParams {
    /// Builds parameters from explicit layers.
    pub fn from_layers(specs: Vec<LayerSpec>, layers: Vec<Layer>) -> Result<Self> {
        validate_specs(&specs)?;
        if specs.len() != layers.len() {
            return Err(Error::ShapeMismatch("one layer per spec required".into()));
        }
        for (i, (s, l)) in specs.iter().zip(&layers).enumerate() {
            if l.weights.dim() != (s.output_width, s.input_width) || l.biases.len() != s.output_width {
                return Err(Error::ShapeMismatch(format!("layer {i} parameters do not match its spec")));
            }
            if !(l.prelu_leakage >= 0.0) {
                return Err(Error::Domain(format!("layer {i} leakage must be >= 0")));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(NetworkParams {
            specs,
            layers,
            revision: next_revision(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.specs[0].input_width
    }

    pub fn num_classes(&self) -> usize {
        self.specs.last().map_or(0, |s| s.output_width)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len() + 1)
            .sum()
    }

    /// Parameters in a fixed order: per layer, row-major weights, biases, leakage.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Overwrites all parameters from the layout of [`Self::to_flat`].
    /// Leakages are projected onto `[0, ∞)`.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut it = values.iter().copied();
        for l in self.layers.iter_mut() {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.biases.iter_mut().for_each(|b| *b = it.next().unwrap());
            l.prelu_leakage = it.next().unwrap().max(0.0);
        }
        self.revision = next_revision();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            layers: self
                .specs
                .iter()
                .zip(&self.layers)
                .map(|(s, l)| LayerDocument {
                    spec: s.clone(),
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                    prelu_leakage: l.prelu_leakage,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        let mut specs = Vec::with_capacity(doc.layers.len());
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            let shape = (l.spec.output_width, l.spec.input_width);
            let weights = Array2::from_shape_vec(shape, l.weights)
                .map_err(|e| Error::Format(format!("weights: {e}")))?;
            layers.push(Layer {
                weights,
                biases: Array1::from(l.biases),
                prelu_leakage: l.prelu_leakage,
            });
            specs.push(l.spec);
        }
        Self::from_layers(specs, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format: String,
    version: u32,
    layers: Vec<LayerDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDocument {
    #[serde(flatten)]
    spec: LayerSpec,
    weights: Vec<f64>,
    biases: Vec<f64>,
    prelu_leakage: f64,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Scaled keep masks (`1/retention` or 0), only for layers that dropped units.
    masks: Vec<Option<Array2<f64>>>,
}

fn prelu(z: f64, leakage: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        leakage * z
    }
}

/// Forward pass returning logits. Dropout is applied only when `training`,
/// with masks drawn from `seed`.
pub fn forward(
    params: &NetworkParams,
    batch_features: &Array2<f64>,
    training: bool,
    seed: u64,
) -> Result<(Array2<f64>, ForwardCache)> {
    if batch_features.ncols() != params.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, network expects {}",
            batch_features.ncols(),
            params.input_width()
        )));
    }
    let mut rng = seeds::rng(seed);
    let mut cache = ForwardCache {
        revision: params.revision,
        inputs: Vec::with_capacity(params.layers.len()),
        pre_activations: Vec::with_capacity(params.layers.len()),
        masks: Vec::with_capacity(params.layers.len()),
    };
    let mut h = batch_features.clone();
    for (spec, layer) in params.specs.iter().zip(&params.layers) {
        let z = h.dot(&layer.weights.t()) + &layer.biases;
        let mut a = match spec.activation {
            Activation::Prelu => z.mapv(|v| prelu(v, layer.prelu_leakage)),
            Activation::Linear => z.clone(),
        };
        let mask = if training && spec.dropout_retention < 1.0 {
            let keep = spec.dropout_retention;
            let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            a *= &m;
            Some(m)
        } else {
            None
        };
        cache.inputs.push(std::mem::replace(&mut h, a));
        cache.pre_activations.push(z);
        cache.masks.push(mask);
    }
    Ok((h, cache))
}

/// Backpropagates `grad_logits` through the pass recorded in `cache`.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, grad_logits: &Array2<f64>) -> Result<NetworkGrads> {
    if cache.revision != params.revision || cache.inputs.len() != params.layers.len() {
        return Err(Error::StaleCache);
    }
    let last = cache.pre_activations.last().expect("non-empty network");
    if grad_logits.dim() != last.dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} for logits {:?}",
            grad_logits.dim(),
            last.dim()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = grad_logits.clone();
    for i in (0..params.layers.len()).rev() {
        let (spec, layer) = (&params.specs[i], &params.layers[i]);
        if let Some(m) = &cache.masks[i] {
            upstream *= m;
        }
        let z = &cache.pre_activations[i];
        let mut leakage_grad = 0.0;
        let dz = match spec.activation {
            Activation::Linear => upstream,
            Activation::Prelu => {
                let mut dz = upstream;
                for (d, &zv) in dz.iter_mut().zip(z.iter()) {
                    if zv <= 0.0 {
                        leakage_grad += zv * *d;
                        *d *= layer.prelu_leakage;
                    }
                }
                dz
            }
        };
        let weights = dz.t().dot(&cache.inputs[i]);
        let biases = dz.sum_axis(Axis(0));
        upstream = dz.dot(&layer.weights);
        grads.push(Layer {
            weights,
            biases,
            prelu_leakage: leakage_grad,
        });
    }
    grads.reverse();
    Ok(NetworkGrads { layers: grads })
}
