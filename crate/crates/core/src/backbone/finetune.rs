//! Joint training of the built-in backbone and a dense head.
//!
//! The same loop serves two purposes: training the built-in backbone from
//! scratch (every block trainable, a throwaway head) and fine-tuning (only
//! the handle's trainable blocks move, at a much smaller learning rate than
//! the head).

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::ConvGrads;
use super::small::{flatten, SmallConvNet, NUM_BLOCKS};
use super::{preprocess, BackboneError, BackboneHandle, BackboneKind};
use crate::dataset::AugmentConfig;
use crate::dataset::{batches, BatchConfig, ImageSource};
use crate::nn::AdamState;
use crate::nn::{one_hot, ClassifierParams, DropoutMasks, NnError};
use crate::nn::{EarlyStopping, StopVerdict, TrainReport};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub head_lr: f64,
    pub backbone_lr: f64,
    /// Multiplier on `backbone_lr`.
    pub backbone_lr_scale: f64,
    pub trainable_blocks: Vec<usize>,
    pub batch_size: usize,
    pub epoch_multiplicity: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            head_lr: 1e-4,
            backbone_lr: 1e-7,
            backbone_lr_scale: 1.0,
            trainable_blocks: vec![4, 5],
            batch_size: 32,
            epoch_multiplicity: 1,
            max_epochs: 10,
            patience: 3,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let lrs = [self.head_lr, self.backbone_lr, self.backbone_lr_scale];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NnError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.epoch_multiplicity == 0 {
            return Err(NnError::Config(
                "batch_size and epoch_multiplicity must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for training the built-in backbone from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    /// Hidden widths of the temporary head.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epoch_multiplicity: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            hidden: vec![64],
            batch_size: 32,
            epoch_multiplicity: 1,
            max_epochs: 3,
            patience: 1,
        }
    }
}

struct Loop<'a> {
    trainable: &'a BTreeSet<usize>,
    head_lr: f64,
    backbone_lr: f64,
    batch: BatchConfig,
    augment: &'a AugmentConfig,
    max_epochs: usize,
    patience: usize,
    /// Initial val accuracy counts as epoch 0.
    use_baseline: bool,
}

fn net_features<S: ImageSource>(net: &SmallConvNet, source: &S) -> Result<(Array2<f64>, Vec<usize>), BackboneError> {
    let rows = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let x = preprocess(source.image(i)?.pixels(), BackboneKind::BuiltinSmall)?;
            Ok(flatten(&net.forward(x.view())?).to_vec())
        })
        .collect::<Result<Vec<_>, BackboneError>>()?;
    let labels = (0..source.len()).map(|i| source.label(i)).collect();
    let x = Array2::from_shape_vec((rows.len(), net.feature_len()), rows.concat())
        .map_err(|e| BackboneError::Shape(e.to_string()))?;
    Ok((x, labels))
}

fn val_accuracy<S: ImageSource>(net: &SmallConvNet, head: &ClassifierParams, val: &S) -> Result<f64, BackboneError> {
    let (x, labels) = net_features(net, val)?;
    let set = crate::nn::FeatureSet::new(x, labels)?;
    Ok(crate::nn::accuracy(head, &set)?)
}

fn all_finite(net: &SmallConvNet, head: &ClassifierParams) -> bool {
    net.blocks
        .iter()
        .all(|b| b.conv.weights.iter().chain(&b.conv.bias).all(|v| v.is_finite()))
        && head
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
}

fn run<S: ImageSource>(
    net: &mut SmallConvNet,
    head: &mut ClassifierParams,
    train: &S,
    val: &S,
    lp: &Loop,
    seed: u64,
) -> Result<TrainReport, BackboneError> {
    head.validate()?;
    if head.input_dim() != net.feature_len() {
        return Err(BackboneError::Shape(format!(
            "head expects {} features, backbone gives {}",
            head.input_dim(),
            net.feature_len()
        )));
    }
    if lp.trainable.iter().any(|b| !(1..=NUM_BLOCKS).contains(b)) {
        return Err(BackboneError::Shape(format!("trainable blocks {:?}", lp.trainable)));
    }
    let k = head.num_classes();
    let first = lp.trainable.iter().next().copied().unwrap_or(NUM_BLOCKS);
    let mut head_opt = AdamState::new(&head.param_sizes(), lp.head_lr);
    let net_sizes: Vec<usize> = lp.trainable.iter().flat_map(|&b| net.block_param_sizes(b)).collect();
    let mut net_opt = AdamState::new(&net_sizes, lp.backbone_lr);

    let initial = val_accuracy(net, head, val)?;
    let mut stopper = EarlyStopping::new(lp.patience, lp.use_baseline.then_some(initial));
    let mut best = (net.clone(), head.clone());
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
    for epoch in 1..=lp.max_epochs {
        let stream = batches(train, true, &lp.batch, lp.augment, seed, epoch as u64)?;
        report.steps_per_epoch = stream.steps();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in stream {
            let batch = batch?;
            let step = batch.step;
            let forward = batch
                .images
                .par_iter()
                .map(|img| {
                    let x = preprocess(img.pixels(), BackboneKind::BuiltinSmall)?;
                    let (map, cache) = net.forward_cached_from(x.view(), first)?;
                    Ok((flatten(&map).to_vec(), cache))
                })
                .collect::<Result<Vec<_>, BackboneError>>()?;
            let n = forward.len();
            let rows: Vec<f64> = forward.iter().flat_map(|(f, _)| f.iter().copied()).collect();
            let x = Array2::from_shape_vec((n, net.feature_len()), rows)
                .map_err(|e| BackboneError::Shape(e.to_string()))?;
            let y = one_hot(&batch.labels, k);
            let mut rng = seed::stream(seed, "dropout", &[epoch as u64, step as u64]);
            let masks = (head.dropout_rate > 0.0).then(|| DropoutMasks::sample(head, n, &mut rng));
            let (loss, grads) =
                head.loss_and_grads_with_masks(x.view(), y.view(), masks.as_ref(), !lp.trainable.is_empty())?;
            if !loss.is_finite() {
                return Err(NnError::Divergence { epoch, step, loss }.into());
            }
            loss_sum += loss;
            steps += 1;

            if let Some(dx) = &grads.input {
                let per_image = forward
                    .par_iter()
                    .enumerate()
                    .map(|(i, (_, cache))| {
                        let g = dx.index_axis(Axis(0), i);
                        net.backward(cache, g.as_slice().expect("row"), lp.trainable)
                    })
                    .collect::<Result<Vec<_>, BackboneError>>()?;
                let mut total: Vec<Option<ConvGrads>> = vec![None; NUM_BLOCKS];
                for img in per_image {
                    for (acc, g) in total.iter_mut().zip(img) {
                        match (acc.as_mut(), g) {
                            (Some(a), Some(g)) => {
                                a.weights += &g.weights;
                                a.bias += &g.bias;
                            }
                            (None, Some(g)) => *acc = Some(g),
                            _ => {}
                        }
                    }
                }
                let grad_slices: Vec<&[f64]> = lp
                    .trainable
                    .iter()
                    .flat_map(|&b| {
                        let g = total[b - 1].as_ref().expect("trainable block has a gradient");
                        [
                            g.weights.as_slice().expect("standard layout"),
                            g.bias.as_slice().expect("standard layout"),
                        ]
                    })
                    .collect();
                let mut params: Vec<&mut [f64]> = net
                    .blocks
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| lp.trainable.contains(&(i + 1)))
                    .flat_map(|(_, b)| {
                        [
                            b.conv.weights.as_slice_mut().expect("standard layout"),
                            b.conv.bias.as_slice_mut().expect("standard layout"),
                        ]
                    })
                    .collect();
                net_opt.step(&mut params, &grad_slices);
            }
            head_opt.step(&mut head.params_mut(), &grads.slices());
            if !all_finite(net, head) {
                return Err(NnError::Divergence { epoch, step, loss }.into());
            }
        }
        let acc = val_accuracy(net, head, val)?;
        let mean_loss = loss_sum / steps.max(1) as f64;
        report.train_loss.push(mean_loss);
        report.val_accuracy.push(acc);
        report.stopped_epoch = epoch;
        log::info!("epoch {epoch}: loss {mean_loss:.5} val accuracy {acc:.4}");
        match stopper.update(epoch, acc) {
            StopVerdict::Improved => best = (net.clone(), head.clone()),
            StopVerdict::Continue => {}
            StopVerdict::Stop => break,
        }
    }
    if report.stopped_epoch > 0 {
        (*net, *head) = best;
        report.best_epoch = stopper.best_epoch;
        report.best_val_accuracy = stopper.best;
    }
    Ok(report)
}

/// Fine-tunes the handle's trainable blocks together with `head`.
///
/// The backbone learning rate is `backbone_lr * backbone_lr_scale`. Early
/// stopping treats the starting val accuracy as epoch 0, so a run that never
/// improves hands back the inputs unchanged. Training randomness comes from
/// the `shuffle`, `augment` and `dropout` streams of `seed`.
pub fn finetune<S: ImageSource>(
    handle: &mut BackboneHandle,
    head: &mut ClassifierParams,
    train: &S,
    val: &S,
    cfg: &FinetuneConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<TrainReport, BackboneError> {
    if handle.kind() != BackboneKind::BuiltinSmall {
        return Err(BackboneError::Unsupported(
            "fine-tuning needs the built-in backbone; the pretrained one is inference-only".into(),
        ));
    }
    cfg.validate()?;
    augment.validate().map_err(NnError::Config)?;
    let trainable: BTreeSet<usize> = cfg.trainable_blocks.iter().copied().collect();
    *handle = handle.clone().with_trainable(&cfg.trainable_blocks)?;
    let mut net = handle.net().expect("builtin").clone();
    let lp = Loop {
        trainable: &trainable,
        head_lr: cfg.head_lr,
        backbone_lr: cfg.backbone_lr * cfg.backbone_lr_scale,
        batch: BatchConfig {
            batch_size: cfg.batch_size,
            epoch_multiplicity: cfg.epoch_multiplicity,
        },
        augment,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        use_baseline: true,
    };
    let report = run(&mut net, head, train, val, &lp, seed)?;
    if report.best_epoch > 0 {
        handle.set_net(net)?;
    }
    Ok(report)
}

/// Trains a fresh built-in backbone, every block trainable, through a
/// temporary head that is returned alongside. Initial weights come from the
/// `init` stream of `seed`.
pub fn pretrain_builtin<S: ImageSource>(
    train: &S,
    val: &S,
    num_classes: usize,
    cfg: &PretrainConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<(BackboneHandle, ClassifierParams, TrainReport), BackboneError> {
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(NnError::Config("learning_rate must be positive".into()).into());
    }
    augment.validate().map_err(NnError::Config)?;
    let mut net = SmallConvNet::he_init(&mut seed::stream(seed, "init", &[0]));
    let mut head = ClassifierParams::new(
        net.feature_len(),
        &cfg.hidden,
        num_classes,
        0.0,
        seed::derive(seed, "init", &[1]),
    )?;
    let all: BTreeSet<usize> = (1..=NUM_BLOCKS).collect();
    let lp = Loop {
        trainable: &all,
        head_lr: cfg.learning_rate,
        backbone_lr: cfg.learning_rate,
        batch: BatchConfig {
            batch_size: cfg.batch_size,
            epoch_multiplicity: cfg.epoch_multiplicity,
        },
        augment,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        use_baseline: false,
    };
    let report = run(&mut net, &mut head, train, val, &lp, seed)?;
    Ok((BackboneHandle::builtin(net)?, head, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MemorySource;
    use crate::imaging::SpecimenImage;
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};

    /// Class 0 is dark, class 1 bright, both with noise.
    fn source(n: usize, seed: u64) -> MemorySource {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut src = MemorySource::default();
        for i in 0..n {
            let label = i % 2;
            let base = if label == 0 { 60.0 } else { 170.0 };
            let px = RgbImage::from_fn(224, 224, |_, _| {
                let v = (base + rng.gen_range(-40.0..40.0)) as u8;
                Rgb([v, v / 2, 255 - v])
            });
            src.images
                .push(SpecimenImage::new(px, format!("s{i}"), (0.0, 0.0)).unwrap());
            src.labels.push(label);
        }
        src
    }

    fn setup() -> (BackboneHandle, ClassifierParams, MemorySource, MemorySource) {
        let net = SmallConvNet::he_init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let head = ClassifierParams::new(net.feature_len(), &[8], 2, 0.3, 2).unwrap();
        (BackboneHandle::builtin(net).unwrap(), head, source(6, 3), source(4, 4))
    }

    fn quick_cfg() -> FinetuneConfig {
        FinetuneConfig {
            batch_size: 3,
            max_epochs: 1,
            patience: 1,
            backbone_lr: 1e-3,
            head_lr: 1e-2,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut h, mut head, train, val) = setup();
        let (h0, head0) = (h.clone(), head.clone());
        let cfg = FinetuneConfig {
            max_epochs: 0,
            ..quick_cfg()
        };
        let r = finetune(&mut h, &mut head, &train, &val, &cfg, &AugmentConfig::default(), 9).unwrap();
        assert_eq!(h.net(), h0.net());
        assert_eq!(head, head0);
        assert_eq!(r.best_val_accuracy, r.initial_val_accuracy);
        assert_eq!(r.stopped_epoch, 0);
    }

    #[test]
    fn frozen_blocks_stay_bit_identical() {
        let (h0, head0, train, val) = setup();
        // Run the loop directly so the update is kept whatever val accuracy does.
        let mut net = h0.net().unwrap().clone();
        let mut head = head0.clone();
        let trainable: BTreeSet<usize> = [4, 5].into();
        let augment = &AugmentConfig::default();
        let lp = Loop {
            trainable: &trainable,
            head_lr: 1e-2,
            backbone_lr: 1e-3,
            batch: BatchConfig {
                batch_size: 3,
                epoch_multiplicity: 1,
            },
            augment,
            max_epochs: 1,
            patience: 5,
            use_baseline: false,
        };
        run(&mut net, &mut head, &train, &val, &lp, 10).unwrap();
        let before = h0.net().unwrap();
        for b in 0..3 {
            assert_eq!(net.blocks[b], before.blocks[b], "block {}", b + 1);
        }
        for b in 3..5 {
            assert_ne!(
                net.blocks[b].conv.weights,
                before.blocks[b].conv.weights,
                "block {}",
                b + 1
            );
        }
        assert_ne!(head, head0);
    }

    #[test]
    fn finetune_is_deterministic_and_keeps_frozen_blocks() {
        let (h0, head0, train, val) = setup();
        let run_once = || {
            let (mut h, mut head) = (h0.clone(), head0.clone());
            let r = finetune(
                &mut h,
                &mut head,
                &train,
                &val,
                &quick_cfg(),
                &AugmentConfig::default(),
                11,
            )
            .unwrap();
            (h, head, r)
        };
        let (a, ha, ra) = run_once();
        let (b, hb, rb) = run_once();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ra.val_accuracy, rb.val_accuracy);
        for i in 0..3 {
            assert_eq!(a.net().unwrap().blocks[i], h0.net().unwrap().blocks[i]);
        }
        assert_eq!(a.trainable_blocks(), &[4, 5].into());
    }

    #[test]
    fn pretrained_kind_is_unsupported() {
        let mut h = BackboneHandle::pretrained_from_bytes(&super::super::onnx::build::tiny_feature_stack(1)).unwrap();
        let mut head = ClassifierParams::new(crate::nn::PRETRAINED_FEATURE_LEN, &[4], 2, 0.0, 1).unwrap();
        let (_, _, train, val) = setup();
        assert!(matches!(
            finetune(
                &mut h,
                &mut head,
                &train,
                &val,
                &quick_cfg(),
                &AugmentConfig::default(),
                1
            ),
            Err(BackboneError::Unsupported(_))
        ));
    }

    #[test]
    fn pretraining_learns_an_easy_split() {
        let (train, val) = (source(16, 5), source(8, 6));
        let cfg = PretrainConfig {
            batch_size: 4,
            max_epochs: 2,
            patience: 2,
            ..PretrainConfig::default()
        };
        let (h, head, report) = pretrain_builtin(&train, &val, 2, &cfg, &AugmentConfig::identity(), 7).unwrap();
        assert_eq!(h.kind(), BackboneKind::BuiltinSmall);
        assert_eq!(head.num_classes(), 2);
        assert!(report.best_val_accuracy >= 0.99, "{report:?}");
    }
}
