//! Dense classification head written from scratch.
//!
//! The head is a stack of dense layers: ReLU hidden layers, each followed
//! by inverted dropout in training mode, and a softmax output. The default
//! shape is 25088 → 512 → 64 → 4.

mod grid;
mod optim;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{grid_search, Grid, GridEntry, GridResult};
pub use optim::{AdamState, Optimizer, OptimizerKind};
pub use train::{
    accuracy, argmax, predict, train, EarlyStopping, FeatureSet, FeatureSplits, StopVerdict, TrainConfig, TrainReport,
};

use crate::{seed, NUM_CLASSES};

/// Feature length of the pretrained backbone, `7 * 7 * 512`.
pub const PRETRAINED_FEATURE_LEN: usize = 25088;
/// Hidden widths of the default head.
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 64];

/// Floor applied to probabilities inside the logarithm of the loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(in_dim, out_dim)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Weights of the whole head plus its dropout rate and init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub layers: Vec<DenseLayer>,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl ClassifierParams {
    /// Fresh head: He-normal ReLU layers, Glorot-normal softmax layer, zero biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = seed::stream(seed, "init", &[]);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let (activation, std) = if i == last {
                    (Activation::Softmax, (2.0 / (fan_in + fan_out) as f64).sqrt())
                } else {
                    (Activation::Relu, (2.0 / fan_in as f64).sqrt())
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut layer = DenseLayer::zeros(fan_in, fan_out, activation);
                layer.weights.mapv_inplace(|_| normal.sample(&mut rng));
                layer
            })
            .collect();
        let params = Self {
            layers,
            dropout_rate,
            rng_seed: seed,
        };
        params.validate()?;
        Ok(params)
    }

    /// The 25088 → 512 → 64 → 4 head with dropout 0.5.
    pub fn table1(seed: u64) -> Self {
        Self::new(PRETRAINED_FEATURE_LEN, &DEFAULT_HIDDEN, NUM_CLASSES, 0.5, seed).expect("valid default head")
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize, dropout_rate: f64) -> Self {
        let mut p = Self::new(input_dim, hidden, num_classes, dropout_rate, 0).expect("valid dims");
        for l in &mut p.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        p
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Config("head has no layers".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::Shape(format!("layer {i} bias length mismatch")));
            }
            let want_softmax = i == n - 1;
            if want_softmax != (l.activation == Activation::Softmax) {
                return Err(NnError::Config("only the last layer may (and must) use softmax".into()));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("weights"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::out_dim)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Sizes of [`Self::params_mut`] slices.
    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect()
    }

    /// Flat parameter slices: weights then bias, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Class probabilities, one row per input row.
    pub fn forward<R: Rng>(&self, features: ArrayView2<f64>, mode: Mode, rng: &mut R) -> Result<Array2<f64>, NnError> {
        let masks = self.masks_for(features.nrows(), mode, rng);
        self.forward_with_masks(features, masks.as_ref())
    }

    fn masks_for<R: Rng>(&self, batch: usize, mode: Mode, rng: &mut R) -> Option<DropoutMasks> {
        (mode == Mode::Train && self.dropout_rate > 0.0).then(|| DropoutMasks::sample(self, batch, rng))
    }

    pub fn forward_with_masks(
        &self,
        features: ArrayView2<f64>,
        masks: Option<&DropoutMasks>,
    ) -> Result<Array2<f64>, NnError> {
        Ok(self.run(features, masks)?.pop().expect("at least one layer").output)
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<(), NnError> {
        if features.ncols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "expected {} features, got {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("features"));
        }
        Ok(())
    }

    /// `features · W + b` of the first layer, the part of a pass that dropout never touches.
    pub fn first_preactivation(&self, features: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_features(&features)?;
        let first = &self.layers[0];
        Ok(features.dot(&first.weights) + &first.bias)
    }

    /// Finishes a forward pass from [`Self::first_preactivation`].
    pub fn forward_from_first(&self, z0: &Array2<f64>, masks: Option<&DropoutMasks>) -> Result<Array2<f64>, NnError> {
        if z0.ncols() != self.layers[0].out_dim() {
            return Err(NnError::Shape(format!(
                "expected {} pre-activations, got {}",
                self.layers[0].out_dim(),
                z0.ncols()
            )));
        }
        Ok(self.trace(z0.clone(), masks).pop().expect("at least one layer").output)
    }

    fn run(&self, features: ArrayView2<f64>, masks: Option<&DropoutMasks>) -> Result<Vec<LayerTrace>, NnError> {
        let z0 = self.first_preactivation(features)?;
        Ok(self.trace(z0, masks))
    }

    fn trace(&self, z0: Array2<f64>, masks: Option<&DropoutMasks>) -> Vec<LayerTrace> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut z0 = Some(z0);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = match (z0.take(), traces.last()) {
                (Some(z), _) => z,
                (None, Some(t)) => t.output.dot(&layer.weights) + &layer.bias,
                (None, None) => unreachable!("first layer consumes z0"),
            };
            let output = match layer.activation {
                Activation::Relu => {
                    let mut a = z.mapv(|v| v.max(0.0));
                    if let Some(m) = masks.and_then(|m| m.masks.get(i)) {
                        a *= m;
                    }
                    a
                }
                Activation::None => {
                    let mut a = z.clone();
                    if let Some(m) = masks.and_then(|m| m.masks.get(i)) {
                        a *= m;
                    }
                    a
                }
                Activation::Softmax => softmax_rows(&z),
            };
            traces.push(LayerTrace { pre: z, output });
        }
        traces
    }

    /// Mean cross-entropy and its gradients; dropout masks are drawn from `rng` in train mode.
    pub fn loss_and_grads<R: Rng>(
        &self,
        features: ArrayView2<f64>,
        one_hot: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, Gradients), NnError> {
        let masks = self.masks_for(features.nrows(), mode, rng);
        self.loss_and_grads_with_masks(features, one_hot, masks.as_ref(), false)
    }

    /// Backpropagation with explicit masks. `need_input` also returns `dL/dfeatures`.
    pub fn loss_and_grads_with_masks(
        &self,
        features: ArrayView2<f64>,
        one_hot: ArrayView2<f64>,
        masks: Option<&DropoutMasks>,
        need_input: bool,
    ) -> Result<(f64, Gradients), NnError> {
        if one_hot.dim() != (features.nrows(), self.num_classes()) {
            return Err(NnError::Shape(format!(
                "labels are {:?}, expected ({}, {})",
                one_hot.dim(),
                features.nrows(),
                self.num_classes()
            )));
        }
        let traces = self.run(features, masks)?;
        let probs = &traces.last().expect("layers").output;
        let batch = features.nrows() as f64;
        let loss = cross_entropy(probs, &one_hot);

        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        // Softmax followed by cross-entropy.
        let mut dz = (probs - &one_hot) / batch;
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weights = if i == 0 {
                features.t().dot(&dz)
            } else {
                traces[i - 1].output.t().dot(&dz)
            };
            grads.push(LayerGrads {
                weights,
                bias: dz.sum_axis(Axis(0)),
            });
            if i == 0 && !need_input {
                break;
            }
            let dinput = dz.dot(&layer.weights.t());
            if i == 0 {
                input_grad = Some(dinput);
                break;
            }
            let prev = &self.layers[i - 1];
            let mut d = dinput;
            if let Some(m) = masks.and_then(|m| m.masks.get(i - 1)) {
                d *= m;
            }
            if prev.activation == Activation::Relu {
                d.zip_mut_with(&traces[i - 1].pre, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            dz = d;
        }
        grads.reverse();
        Ok((
            loss,
            Gradients {
                layers: grads,
                input: input_grad,
            },
        ))
    }
}

struct LayerTrace {
    pre: Array2<f64>,
    output: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean over rows of `-sum_k y_k ln(max(p_k, 1e-12))`.
pub fn cross_entropy(probs: &Array2<f64>, one_hot: &ArrayView2<f64>) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(one_hot.iter())
        .filter(|(_, &y)| y != 0.0)
        // NaN must survive the clamp so divergence is visible.
        .map(|(&p, &y)| -y * if p.is_nan() { p } else { p.max(LOG_CLAMP) }.ln())
        .sum();
    total / probs.nrows().max(1) as f64
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (r, &l) in labels.iter().enumerate() {
        y[[r, l]] = 1.0;
    }
    y
}

/// Per-hidden-layer inverted-dropout multipliers: `0` or `1 / (1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Array2<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(params: &ClassifierParams, batch: usize, rng: &mut R) -> Self {
        let p = params.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        let masks = params.layers[..params.layers.len() - 1]
            .iter()
            .map(|l| {
                Array2::from_shape_simple_fn((batch, l.out_dim()), || if rng.gen::<f64>() < p { 0.0 } else { keep })
            })
            .collect();
        Self { masks }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// `dL/dfeatures`, when requested.
    pub input: Option<Array2<f64>>,
}

impl Gradients {
    /// Flat slices in the order of [`ClassifierParams::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}
