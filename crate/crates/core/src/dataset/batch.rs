//! Seeded mini-batch streams.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::{DatasetError, DatasetManifest, Split};
use crate::imaging::{io::read_rgb, SpecimenImage};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Augmented passes over the training split per epoch.
    pub epoch_multiplicity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epoch_multiplicity: 4,
        }
    }
}

/// Index lists of every step in one epoch.
///
/// Each of the `multiplicity` passes is a separate permutation when
/// `shuffle` carries `(seed, epoch)`, otherwise the identity order. The last
/// step may be short.
pub fn epoch_plan(
    n: usize,
    batch_size: usize,
    multiplicity: usize,
    shuffle: Option<(u64, u64)>,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 || multiplicity == 0 {
        return Err(DatasetError::Config(
            "batch size and epoch multiplicity must be positive".into(),
        ));
    }
    let mut order = Vec::with_capacity(n * multiplicity);
    for pass in 0..multiplicity {
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some((s, epoch)) = shuffle {
            idx.shuffle(&mut seed::stream(s, "shuffle", &[epoch, pass as u64]));
        }
        order.extend(idx);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Random access to labelled specimen images.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> usize;
    fn image(&self, i: usize) -> Result<SpecimenImage, DatasetError>;
}

/// Images held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: Vec<SpecimenImage>,
    pub labels: Vec<usize>,
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<SpecimenImage, DatasetError> {
        Ok(self.images[i].clone())
    }
}

/// One split of a manifest, decoded from disk on demand.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    paths: Vec<PathBuf>,
    labels: Vec<usize>,
}

impl ManifestSource {
    pub fn new(manifest: &DatasetManifest, split: Split) -> Result<Self, DatasetError> {
        let mut paths = Vec::new();
        let mut labels = Vec::new();
        for i in manifest.indices(split) {
            let r = &manifest.records[i];
            paths.push(manifest.path_of(r));
            labels.push(manifest.label_id(&r.label)?);
        }
        Ok(Self { paths, labels })
    }

    /// Loads every image of the split.
    pub fn into_memory(self) -> Result<MemorySource, DatasetError> {
        let images = (0..self.len())
            .into_par_iter()
            .map(|i| self.image(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MemorySource {
            images,
            labels: self.labels,
        })
    }
}

impl ImageSource for ManifestSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<SpecimenImage, DatasetError> {
        let path = &self.paths[i];
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(SpecimenImage::new(read_rgb(path)?, stem, (0.0, 0.0))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: u64,
    pub step: usize,
    /// Positions in the source.
    pub indices: Vec<usize>,
    pub images: Vec<SpecimenImage>,
    pub labels: Vec<usize>,
}

/// Iterator over the batches of one epoch.
pub struct BatchStream<'a, S: ImageSource> {
    source: &'a S,
    plan: Vec<Vec<usize>>,
    augment: Option<AugmentConfig>,
    seed: u64,
    epoch: u64,
    next: usize,
}

impl<S: ImageSource> BatchStream<'_, S> {
    pub fn steps(&self) -> usize {
        self.plan.len()
    }
}

impl<S: ImageSource> Iterator for BatchStream<'_, S> {
    type Item = Result<Batch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.plan.get(self.next)?.clone();
        let step = self.next;
        self.next += 1;
        let (seed, epoch) = (self.seed, self.epoch);
        let images = indices
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| {
                let img = self.source.image(i)?;
                Ok(match &self.augment {
                    Some(cfg) => {
                        let mut rng = seed::stream(seed, "augment", &[epoch, step as u64, pos as u64]);
                        augment(&img, cfg, &mut rng)
                    }
                    None => img,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>();
        Some(images.map(|images| Batch {
            epoch,
            step,
            labels: indices.iter().map(|&i| self.source.label(i)).collect(),
            indices,
            images,
        }))
    }
}

/// Batches for one epoch. Training streams are shuffled per `(seed, epoch)`,
/// repeated `epoch_multiplicity` times and augmented per sample; evaluation
/// streams are a single pass in source order with no augmentation.
pub fn batches<'a, S: ImageSource>(
    source: &'a S,
    training: bool,
    cfg: &BatchConfig,
    augment: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<BatchStream<'a, S>, DatasetError> {
    if source.is_empty() {
        return Err(DatasetError::EmptySplit(if training {
            Split::Train
        } else {
            Split::Val
        }));
    }
    let plan = if training {
        epoch_plan(
            source.len(),
            cfg.batch_size,
            cfg.epoch_multiplicity,
            Some((seed, epoch)),
        )?
    } else {
        epoch_plan(source.len(), cfg.batch_size, 1, None)?
    };
    Ok(BatchStream {
        source,
        plan,
        augment: training.then(|| augment.clone()),
        seed,
        epoch,
        next: 0,
    })
}

/// Source over one manifest split, rejecting empty splits.
pub fn split_source(manifest: &DatasetManifest, split: Split) -> Result<ManifestSource, DatasetError> {
    let src = ManifestSource::new(manifest, split)?;
    if src.is_empty() {
        return Err(DatasetError::EmptySplit(split));
    }
    Ok(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn source(n: usize) -> MemorySource {
        MemorySource {
            images: (0..n)
                .map(|i| {
                    let px = RgbImage::from_fn(224, 224, |x, y| Rgb([i as u8, x as u8, y as u8]));
                    SpecimenImage::new(px, format!("s{i}"), (0.0, 0.0)).unwrap()
                })
                .collect(),
            labels: (0..n).map(|i| i % 4).collect(),
        }
    }

    #[test]
    fn sixty_four_records_make_two_batches() {
        let plan = epoch_plan(64, 32, 1, Some((1, 0))).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|b| b.len() == 32));
    }

    #[test]
    fn full_size_train_split_step_count() {
        let plan = epoch_plan(2138, 32, 4, Some((1, 0))).unwrap();
        assert_eq!(plan.len(), (2138 * 4usize).div_ceil(32));
        assert_eq!(plan.len(), 268);
        assert_eq!(plan.last().unwrap().len(), 2138 * 4 - 267 * 32);
    }

    #[test]
    fn every_record_appears_multiplicity_times() {
        let plan = epoch_plan(37, 5, 3, Some((4, 2))).unwrap();
        let mut counts = [0; 37];
        for i in plan.into_iter().flatten() {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn epochs_shuffle_differently() {
        let a = epoch_plan(50, 50, 1, Some((4, 0))).unwrap();
        let b = epoch_plan(50, 50, 1, Some((4, 1))).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, epoch_plan(50, 50, 1, Some((4, 0))).unwrap());
    }

    #[test]
    fn eval_stream_is_repeatable_and_unaugmented() {
        let src = source(5);
        let cfg = BatchConfig {
            batch_size: 2,
            epoch_multiplicity: 4,
        };
        let collect = |seed| {
            batches(&src, false, &cfg, &AugmentConfig::default(), seed, 0)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        };
        let a = collect(1);
        assert_eq!(a, collect(1));
        assert_eq!(a.len(), 3);
        let flat: Vec<&SpecimenImage> = a.iter().flat_map(|b| &b.images).collect();
        for (i, img) in flat.iter().enumerate() {
            assert_eq!(*img, &src.images[i]);
        }
    }

    #[test]
    fn train_stream_augments_and_is_seeded() {
        let src = source(6);
        let cfg = BatchConfig {
            batch_size: 4,
            epoch_multiplicity: 2,
        };
        let run = || {
            batches(&src, true, &cfg, &AugmentConfig::default(), 9, 3)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 3);
        let changed = a
            .iter()
            .flat_map(|b| b.indices.iter().zip(&b.images))
            .filter(|(&i, img)| *img != &src.images[i])
            .count();
        assert!(changed > 0);
        for b in &a {
            for (&i, &l) in b.indices.iter().zip(&b.labels) {
                assert_eq!(l, src.labels[i]);
            }
        }
    }

    #[test]
    fn empty_source_is_an_error() {
        let src = source(0);
        assert!(matches!(
            batches(&src, true, &BatchConfig::default(), &AugmentConfig::default(), 0, 0),
            Err(DatasetError::EmptySplit(_))
        ));
    }
}
