//! Mini-batch training with validation-based early stopping.

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{one_hot, ClassifierParams, Mode, NnError, Optimizer, OptimizerKind};
use crate::dataset::epoch_plan;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    pub patience: usize,
    /// Passes over the training set per epoch.
    pub epoch_multiplicity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            max_epochs: 50,
            patience: 3,
            epoch_multiplicity: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 || self.epoch_multiplicity == 0 {
            return Err(NnError::Config(
                "batch_size and epoch_multiplicity must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Feature rows with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        if features.nrows() != labels.len() {
            return Err(NnError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSplits {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: Option<FeatureSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    /// Validation accuracy of the starting parameters.
    pub initial_val_accuracy: f64,
    /// Number of epochs run.
    pub stopped_epoch: usize,
    /// Epoch whose parameters were restored (`0` = the starting parameters).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub steps_per_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` epochs without a strict improvement in accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    /// `baseline` counts as epoch 0; without one the first epoch always improves.
    pub fn new(patience: usize, baseline: Option<f64>) -> Self {
        Self {
            patience,
            best: baseline.unwrap_or(f64::NEG_INFINITY),
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, accuracy: f64) -> StopVerdict {
        if accuracy > self.best {
            self.best = accuracy;
            self.best_epoch = epoch;
            self.wait = 0;
            return StopVerdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopVerdict::Stop
        } else {
            StopVerdict::Continue
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode class probabilities.
pub fn predict(params: &ClassifierParams, features: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    let n = features.nrows();
    let chunks: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_CHUNK).min(n);
            params.forward_with_masks(features.slice(s![start..end, ..]), None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, params.num_classes())));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(params: &ClassifierParams, set: &FeatureSet) -> Result<f64, NnError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let probs = predict(params, &set.features)?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&set.labels)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Trains `params` in place and leaves it at the best-validation epoch.
///
/// Randomness comes from `seed`: the batch order from the `shuffle` stream
/// at `(epoch, pass)` and dropout masks from the `dropout` stream at
/// `(epoch, step)`.
pub fn train(
    params: &mut ClassifierParams,
    data: &FeatureSplits,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport, NnError> {
    cfg.validate()?;
    params.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(NnError::Config("train and val sets must be non-empty".into()));
    }
    let k = params.num_classes();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params.param_sizes());
    let initial = accuracy(params, &data.val)?;
    let mut stopper = EarlyStopping::new(cfg.patience, None);
    let mut best = params.clone();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        initial_val_accuracy: initial,
        stopped_epoch: 0,
        best_epoch: 0,
        best_val_accuracy: initial,
        test_accuracy: None,
        steps_per_epoch: 0,
    };
    for epoch in 1..=cfg.max_epochs {
        let plan = epoch_plan(
            data.train.len(),
            cfg.batch_size,
            cfg.epoch_multiplicity,
            Some((seed, epoch as u64)),
        )
        .map_err(|e| NnError::Config(e.to_string()))?;
        report.steps_per_epoch = plan.len();
        let mut loss_sum = 0.0;
        for (step, idx) in plan.iter().enumerate() {
            let (x, labels) = data.train.rows(idx);
            let y = one_hot(&labels, k);
            let mut rng = seed::stream(seed, "dropout", &[epoch as u64, step as u64]);
            let (loss, grads) = params.loss_and_grads(x.view(), y.view(), Mode::Train, &mut rng)?;
            if !loss.is_finite() {
                return Err(NnError::Divergence { epoch, step, loss });
            }
            loss_sum += loss;
            opt.step(&mut params.params_mut(), &grads.slices());
            if params.params_mut().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(NnError::Divergence { epoch, step, loss });
            }
        }
        let val = accuracy(params, &data.val)?;
        report.train_loss.push(loss_sum / plan.len() as f64);
        report.val_accuracy.push(val);
        report.stopped_epoch = epoch;
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", loss_sum / plan.len() as f64, val);
        match stopper.update(epoch, val) {
            StopVerdict::Improved => best = params.clone(),
            StopVerdict::Continue => {}
            StopVerdict::Stop => break,
        }
    }
    if report.stopped_epoch > 0 {
        *params = best;
        report.best_epoch = stopper.best_epoch;
        report.best_val_accuracy = stopper.best;
    }
    report.test_accuracy = match &data.test {
        Some(t) if !t.is_empty() => Some(accuracy(params, t)?),
        _ => None,
    };
    Ok(report)
}
