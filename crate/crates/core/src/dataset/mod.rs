//! Labelled specimen manifests, splitting, augmentation, batching and the
//! procedural plate generator.

mod augment;
mod batch;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, hsv_to_rgb, rgb_to_hsv, AugmentConfig, AugmentParams};
pub use batch::{
    batches, epoch_plan, split_source, Batch, BatchConfig, BatchStream, ImageSource, ManifestSource, MemorySource,
};
pub use synth::{benchmark_plate_spec, generate_synthetic, BenchmarkConfig, BlobSpec, BlobTruth, PlateSpec};

use crate::imaging::ImagingError;
use crate::{fsutil, seed, CLASS_NAMES};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class `{class}` has {count} records; stratified splitting needs at least 3")]
    Stratification { class: String, count: usize },
    #[error("label `{0}` is not one of the manifest class names")]
    UnknownLabel(String),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place {requested} blobs without overlap after {attempts} attempts")]
    Placement { requested: usize, attempts: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecimenRecord {
    /// Image path relative to the manifest root.
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SpecimenRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SpecimenRecord>) -> Result<Self, DatasetError> {
        let m = Self {
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Every `<root>/<class_name>/*.png`, classes in id order, files sorted by name.
    pub fn ingest(root: &Path) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for class in CLASS_NAMES {
            let dir = root.join(class);
            if !dir.is_dir() {
                log::warn!("no directory for class {class} under {}", root.display());
                continue;
            }
            let mut files: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|source| io_err(&dir, source))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .filter_map(|e| e.file_name().to_str().map(str::to_owned))
                .collect();
            files.sort();
            records.extend(files.into_iter().map(|f| SpecimenRecord {
                path: format!("{class}/{f}"),
                label: class.to_string(),
                split: Split::Unassigned,
            }));
        }
        Self::new(root, records)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.class_names.len() != CLASS_NAMES.len() {
            return Err(DatasetError::Invalid(format!(
                "expected {} class names, found {}",
                CLASS_NAMES.len(),
                self.class_names.len()
            )));
        }
        for r in &self.records {
            self.label_id(&r.label)?;
        }
        Ok(())
    }

    pub fn label_id(&self, label: &str) -> Result<usize, DatasetError> {
        self.class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| DatasetError::UnknownLabel(label.to_string()))
    }

    pub fn path_of(&self, record: &SpecimenRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Indices of the records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split, label: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && r.label == label)
            .count()
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String, DatasetError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fsutil::write_atomic(path, self.to_json()?.as_bytes()).map_err(|source| io_err(path, source))
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-class shuffled split with `floor(n * f)` records per split, leftover
/// records going to train, then val, then test.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Config(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    manifest.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.split != Split::Unassigned) {
        return Err(DatasetError::Invalid(format!(
            "record {} is already assigned to {}",
            r.path, r.split
        )));
    }
    let mut out = manifest.clone();
    out.seed = seed;
    for (class_id, class) in manifest.class_names.iter().enumerate() {
        let mut members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.label == class)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n < 3 {
            return Err(DatasetError::Stratification {
                class: class.clone(),
                count: n,
            });
        }
        members.shuffle(&mut seed::stream(seed, "split", &[class_id as u64]));
        let mut counts = [ft, fv, fs].map(|f| (n as f64 * f).floor() as usize);
        let leftover = n - counts.iter().sum::<usize>();
        for k in 0..leftover {
            counts[k % 3] += 1;
        }
        let splits = [Split::Train, Split::Val, Split::Test];
        let mut pos = 0;
        for (split, count) in splits.into_iter().zip(counts) {
            for &i in &members[pos..pos + count] {
                out.records[i].split = split;
            }
            pos += count;
        }
    }
    Ok(out)
}
