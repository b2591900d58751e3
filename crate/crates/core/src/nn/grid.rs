//! Exhaustive search over head widths, dropout rates and optimizers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, ClassifierParams, FeatureSplits, NnError, OptimizerKind, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub hidden: Vec<(usize, usize)>,
    pub dropout_rates: Vec<f64>,
    pub optimizers: Vec<OptimizerKind>,
    /// Epoch budget per configuration.
    pub max_epochs: usize,
}

impl Default for Grid {
    /// 6 width pairs × 3 dropout rates × 4 optimizers = 72 configurations.
    fn default() -> Self {
        Self {
            hidden: vec![(256, 32), (512, 64), (1024, 128), (32, 256), (64, 512), (128, 1024)],
            dropout_rates: vec![0.3, 0.4, 0.5],
            optimizers: OptimizerKind::ALL.to_vec(),
            max_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub hidden: (usize, usize),
    pub dropout_rate: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

impl Grid {
    /// Cartesian product in `hidden`, `dropout_rates`, `optimizers` order.
    /// Adam uses `adam_lr`; other optimizers their conventional default.
    pub fn entries(&self, adam_lr: f64) -> Vec<GridEntry> {
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &dropout_rate in &self.dropout_rates {
                for &optimizer in &self.optimizers {
                    out.push(GridEntry {
                        hidden,
                        dropout_rate,
                        optimizer,
                        learning_rate: optimizer.default_lr(adam_lr),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Position in the configuration order.
    pub index: usize,
    pub entry: GridEntry,
    pub best_val_accuracy: f64,
    pub param_count: usize,
}

/// Trains every entry of `grid` and ranks them by validation accuracy,
/// then fewer parameters, then configuration order. Entry `i` is seeded
/// from the `grid` stream of `seed` at index `i`.
pub fn grid_search(
    grid: &Grid,
    data: &FeatureSplits,
    base: &TrainConfig,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<GridResult>, NnError> {
    let entries = grid.entries(base.learning_rate);
    if entries.is_empty() {
        return Err(NnError::Config("grid has no configurations".into()));
    }
    let input_dim = data.train.features.ncols();
    let mut results = entries
        .par_iter()
        .enumerate()
        .map(|(index, entry)| {
            let s = seed::derive(seed, "grid", &[index as u64]);
            let mut params = ClassifierParams::new(
                input_dim,
                &[entry.hidden.0, entry.hidden.1],
                num_classes,
                entry.dropout_rate,
                s,
            )?;
            let cfg = TrainConfig {
                optimizer: entry.optimizer,
                learning_rate: entry.learning_rate,
                max_epochs: grid.max_epochs,
                ..base.clone()
            };
            let report = train(&mut params, data, &cfg, s)?;
            Ok(GridResult {
                index,
                entry: *entry,
                best_val_accuracy: report.best_val_accuracy,
                param_count: params.param_count(),
            })
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    results.sort_by(|a, b| {
        b.best_val_accuracy
            .total_cmp(&a.best_val_accuracy)
            .then(a.param_count.cmp(&b.param_count))
            .then(a.index.cmp(&b.index))
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FeatureSet;
    use ndarray::Array2;

    fn toy() -> FeatureSplits {
        let set = |offset: f64| {
            let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
            let x = Array2::from_shape_fn((40, 6), |(i, j)| {
                let c = labels[i];
                (if j == c { 2.0 } else { 0.0 }) + offset * ((i * 7 + j * 3) % 5) as f64 * 0.05
            });
            FeatureSet::new(x, labels).unwrap()
        };
        FeatureSplits {
            train: set(1.0),
            val: set(0.5),
            test: None,
        }
    }

    #[test]
    fn default_grid_has_72_entries() {
        let g = Grid::default();
        let e = g.entries(1e-4);
        assert_eq!(e.len(), 72);
        assert_eq!(e[0].learning_rate, 1e-4);
        let unique: std::collections::HashSet<String> = e.iter().map(|x| format!("{x:?}")).collect();
        assert_eq!(unique.len(), 72);
    }

    #[test]
    fn single_config_grid() {
        let grid = Grid {
            hidden: vec![(8, 4)],
            dropout_rates: vec![0.3],
            optimizers: vec![OptimizerKind::Adam],
            max_epochs: 3,
        };
        let base = TrainConfig {
            epoch_multiplicity: 1,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let r = grid_search(&grid, &toy(), &base, 4, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].entry.hidden, (8, 4));
        let mut p = ClassifierParams::new(6, &[8, 4], 4, 0.3, seed::derive(1, "grid", &[0])).unwrap();
        let cfg = TrainConfig { max_epochs: 3, ..base };
        let rep = train(&mut p, &toy(), &cfg, seed::derive(1, "grid", &[0])).unwrap();
        assert_eq!(r[0].best_val_accuracy, rep.best_val_accuracy);
    }

    #[test]
    fn ranking_prefers_accuracy_then_size() {
        // A 1-wide bottleneck cannot separate four classes; 16-wide can.
        let grid = Grid {
            hidden: vec![(1, 1), (16, 16), (32, 32)],
            dropout_rates: vec![0.0],
            optimizers: vec![OptimizerKind::Adam],
            max_epochs: 15,
        };
        let base = TrainConfig {
            epoch_multiplicity: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let r = grid_search(&grid, &toy(), &base, 4, 2).unwrap();
        assert_eq!(r.last().unwrap().entry.hidden, (1, 1));
        for w in r.windows(2) {
            assert!(
                w[0].best_val_accuracy > w[1].best_val_accuracy
                    || (w[0].best_val_accuracy == w[1].best_val_accuracy && w[0].param_count <= w[1].param_count)
            );
        }
    }

    #[test]
    fn empty_grid_is_an_error() {
        let grid = Grid {
            hidden: vec![],
            ..Grid::default()
        };
        assert!(grid_search(&grid, &toy(), &TrainConfig::default(), 4, 0).is_err());
    }
}
