//! Feature extraction backbones.
//!
//! Two kinds exist: an inference-only pretrained stack read from an ONNX
//! interchange file, and the small built-in [`SmallConvNet`], which can also
//! be trained and fine-tuned. Both map a 224×224×3 crop to a flat feature
//! vector in row-major `(height, width, channel)` order.

pub mod conv;
pub mod finetune;
pub mod onnx;
pub mod small;

use std::collections::BTreeSet;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{small_backbone_to_checkpoint, Checkpoint, CheckpointError};
use crate::dataset::DatasetError;
use crate::dataset::ImageSource;
use crate::imaging::SpecimenImage;
use crate::nn::PRETRAINED_FEATURE_LEN;
use crate::CROP_SIZE;

pub use finetune::{finetune, pretrain_builtin, FinetuneConfig, PretrainConfig};
pub use onnx::InterchangeModel;
pub use small::{SmallConvNet, NUM_BLOCKS, SMALL_FEATURE_LEN};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot load model: {0}")]
    Load(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Per-channel normalisation of the pretrained kind.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Output map of the pretrained kind.
pub const PRETRAINED_OUTPUT: (usize, usize, usize) = (7, 7, 512);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    PretrainedInterchange,
    BuiltinSmall,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainedInterchange => "pretrained_interchange",
            Self::BuiltinSmall => "builtin_small",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Pretrained(InterchangeModel),
    Builtin(SmallConvNet),
}

/// A loaded backbone. Extraction never mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneHandle {
    model: Model,
    trainable_blocks: BTreeSet<usize>,
    hash: String,
}

fn content_hash(kind: BackboneKind, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update([0]);
    h.update(bytes);
    hex::encode(h.finalize())
}

fn builtin_hash(net: &SmallConvNet) -> Result<String, BackboneError> {
    let bytes = small_backbone_to_checkpoint(net)?.to_bytes()?;
    Ok(content_hash(BackboneKind::BuiltinSmall, &bytes))
}

impl BackboneHandle {
    /// Reads a pretrained stack and checks it yields a 7×7×512 map.
    pub fn pretrained_from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let model = InterchangeModel::from_bytes(bytes)?;
        let probe = Array3::zeros((CROP_SIZE as usize, CROP_SIZE as usize, 3));
        let out = model.forward(probe.view())?;
        if out.dim() != PRETRAINED_OUTPUT {
            return Err(BackboneError::Shape(format!(
                "graph output is {:?}, expected {PRETRAINED_OUTPUT:?}",
                out.dim()
            )));
        }
        Ok(Self {
            model: Model::Pretrained(model),
            trainable_blocks: BTreeSet::new(),
            hash: content_hash(BackboneKind::PretrainedInterchange, bytes),
        })
    }

    pub fn pretrained(path: &Path) -> Result<Self, BackboneError> {
        let bytes = std::fs::read(path).map_err(|e| BackboneError::Load(format!("{}: {e}", path.display())))?;
        Self::pretrained_from_bytes(&bytes)
    }

    pub fn builtin(net: SmallConvNet) -> Result<Self, BackboneError> {
        let hash = builtin_hash(&net)?;
        Ok(Self {
            model: Model::Builtin(net),
            trainable_blocks: BTreeSet::new(),
            hash,
        })
    }

    /// Loads a built-in backbone checkpoint.
    pub fn builtin_from_file(path: &Path) -> Result<Self, BackboneError> {
        let ck = Checkpoint::load(path)?;
        Self::builtin(crate::checkpoint::small_backbone_from_checkpoint(&ck)?)
    }

    /// Marks blocks (ids `1..=5`) as trainable. The pretrained kind refuses.
    pub fn with_trainable(mut self, blocks: &[usize]) -> Result<Self, BackboneError> {
        if matches!(self.model, Model::Pretrained(_)) && !blocks.is_empty() {
            return Err(BackboneError::Unsupported(
                "the pretrained backbone is inference-only".into(),
            ));
        }
        if let Some(b) = blocks.iter().find(|&&b| !(1..=NUM_BLOCKS).contains(&b)) {
            return Err(BackboneError::Shape(format!("no block {b}")));
        }
        self.trainable_blocks = blocks.iter().copied().collect();
        Ok(self)
    }

    pub fn kind(&self) -> BackboneKind {
        match self.model {
            Model::Pretrained(_) => BackboneKind::PretrainedInterchange,
            Model::Builtin(_) => BackboneKind::BuiltinSmall,
        }
    }

    pub fn trainable_blocks(&self) -> &BTreeSet<usize> {
        &self.trainable_blocks
    }

    /// SHA-256 over the kind and the model content.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn net(&self) -> Option<&SmallConvNet> {
        match &self.model {
            Model::Builtin(n) => Some(n),
            Model::Pretrained(_) => None,
        }
    }

    /// Replaces the built-in network, refreshing the hash.
    pub(crate) fn set_net(&mut self, net: SmallConvNet) -> Result<(), BackboneError> {
        match &mut self.model {
            Model::Builtin(n) => *n = net,
            Model::Pretrained(_) => return Err(BackboneError::Unsupported("not a built-in backbone".into())),
        }
        self.hash = builtin_hash(self.net().expect("builtin"))?;
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        match self.model {
            Model::Pretrained(_) => PRETRAINED_FEATURE_LEN,
            Model::Builtin(_) => SMALL_FEATURE_LEN,
        }
    }

    /// Scales to `[0, 1]`, then standardises per channel for the pretrained kind.
    pub fn preprocess(&self, img: &RgbImage) -> Result<Array3<f64>, BackboneError> {
        preprocess(img, self.kind())
    }

    /// Feature vector of one crop.
    pub fn features(&self, img: &SpecimenImage) -> Result<Vec<f64>, BackboneError> {
        let x = self.preprocess(img.pixels())?;
        let map = match &self.model {
            Model::Pretrained(m) => {
                let map = m.forward(x.view())?;
                if map.dim() != PRETRAINED_OUTPUT {
                    return Err(BackboneError::Shape(format!(
                        "graph output is {:?}, expected {PRETRAINED_OUTPUT:?}",
                        map.dim()
                    )));
                }
                map
            }
            Model::Builtin(n) => n.forward(x.view())?,
        };
        Ok(small::flatten(&map).to_vec())
    }

    /// One feature row per image, in input order.
    pub fn extract_features(&self, images: &[SpecimenImage]) -> Result<Array2<f64>, BackboneError> {
        let rows = images
            .par_iter()
            .map(|img| self.features(img))
            .collect::<Result<Vec<_>, _>>()?;
        stack(rows, self.feature_len())
    }

    /// Features and labels of a whole source, loaded in chunks.
    pub fn extract_source<S: ImageSource>(&self, source: &S) -> Result<(Array2<f64>, Vec<usize>), BackboneError> {
        let rows = (0..source.len())
            .into_par_iter()
            .map(|i| self.features(&source.image(i)?))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = (0..source.len()).map(|i| source.label(i)).collect();
        Ok((stack(rows, self.feature_len())?, labels))
    }
}

fn stack(rows: Vec<Vec<f64>>, width: usize) -> Result<Array2<f64>, BackboneError> {
    let n = rows.len();
    Array2::from_shape_vec((n, width), rows.concat()).map_err(|e| BackboneError::Shape(e.to_string()))
}

/// Turns an 8-bit crop into the network input of `kind`.
pub fn preprocess(img: &RgbImage, kind: BackboneKind) -> Result<Array3<f64>, BackboneError> {
    if img.width() != CROP_SIZE || img.height() != CROP_SIZE {
        return Err(BackboneError::Shape(format!(
            "input is {}×{}, expected {CROP_SIZE}×{CROP_SIZE}",
            img.height(),
            img.width()
        )));
    }
    let s = CROP_SIZE as usize;
    Ok(Array3::from_shape_fn((s, s, 3), |(y, x, c)| {
        let v = f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0;
        match kind {
            BackboneKind::PretrainedInterchange => (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
            BackboneKind::BuiltinSmall => v,
        }
    }))
}
