//! Versioned binary container shared by head and backbone checkpoints.
//!
//! Layout: the magic `MFCK`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every tensor's
//! values as little-endian `f64` in header order. Matrices are stored
//! row-major. Backbone features are flattened row-major over
//! `(height, width, channel)`, which is what head weights are indexed by.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backbone::conv::Conv2d;
use crate::backbone::small::SmallConvNet;
use crate::fsutil::write_atomic;
use crate::nn::{Activation, ClassifierParams, DenseLayer};

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const FORMAT_VERSION: u32 = 1;

pub const HEAD_KIND: &str = "classifier_head";
pub const SMALL_BACKBONE_KIND: &str = "small_conv_net";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint is a `{found}`, expected a `{expected}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint has no tensor `{0}`")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self, CheckpointError> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(CheckpointError::Format(format!(
                "tensor {name}: shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Format(format!("tensor {name} has non-finite values")));
        }
        Ok(Self { name, shape, values })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = self.tensors.iter().map(|t| t.values.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let end = pos
                .checked_add(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)
                .ok_or_else(|| bad("tensor too large"))?;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated tensor data"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(th.name, th.shape, values)?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>, CheckpointError> {
        let t = self.tensor(name)?;
        let [r, c] = t.shape[..] else {
            return Err(CheckpointError::Format(format!("{name} is not a matrix")));
        };
        Array2::from_shape_vec((r, c), t.values.clone()).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>, CheckpointError> {
        let t = self.tensor(name)?;
        if t.shape.len() != 1 {
            return Err(CheckpointError::Format(format!("{name} is not a vector")));
        }
        Ok(Array1::from(t.values.clone()))
    }
}

fn matrix_tensor(name: String, m: &Array2<f64>) -> Result<Tensor, CheckpointError> {
    Tensor::new(name, vec![m.nrows(), m.ncols()], m.iter().copied().collect())
}

fn vector_tensor(name: String, v: &Array1<f64>) -> Result<Tensor, CheckpointError> {
    Tensor::new(name, vec![v.len()], v.to_vec())
}

/// A head checkpoint plus the metadata stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub params: ClassifierParams,
    pub class_names: Vec<String>,
    /// Content hash of the backbone the head was trained on.
    pub backbone_hash: String,
}

impl HeadCheckpoint {
    pub fn to_checkpoint(&self) -> Result<Checkpoint, CheckpointError> {
        let p = &self.params;
        let mut tensors = Vec::new();
        for (i, l) in p.layers.iter().enumerate() {
            tensors.push(matrix_tensor(format!("dense{i}.weights"), &l.weights)?);
            tensors.push(vector_tensor(format!("dense{i}.bias"), &l.bias)?);
        }
        Ok(Checkpoint {
            kind: HEAD_KIND.into(),
            meta: json!({
                "activations": p.layers.iter().map(|l| l.activation).collect::<Vec<_>>(),
                "dropout_rate": p.dropout_rate,
                "training_seed": p.rng_seed,
                "class_names": self.class_names,
                "backbone_hash": self.backbone_hash,
                "feature_order": "row-major (height, width, channel)",
            }),
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        ck.expect_kind(HEAD_KIND)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| CheckpointError::Format(format!("missing meta field {k}")))
        };
        let activations: Vec<Activation> = serde_json::from_value(field("activations")?)?;
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &activation)| {
                Ok(DenseLayer {
                    weights: ck.matrix(&format!("dense{i}.weights"))?,
                    bias: ck.vector(&format!("dense{i}.bias"))?,
                    activation,
                })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let params = ClassifierParams {
            layers,
            dropout_rate: serde_json::from_value(field("dropout_rate")?)?,
            rng_seed: serde_json::from_value(field("training_seed")?)?,
        };
        params.validate().map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(Self {
            params,
            class_names: serde_json::from_value(field("class_names")?)?,
            backbone_hash: serde_json::from_value(field("backbone_hash")?)?,
        })
    }
}

pub fn small_backbone_to_checkpoint(net: &SmallConvNet) -> Result<Checkpoint, CheckpointError> {
    let mut tensors = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        tensors.push(matrix_tensor(format!("block{}.weights", i + 1), &b.conv.weights)?);
        tensors.push(vector_tensor(format!("block{}.bias", i + 1), &b.conv.bias)?);
    }
    Ok(Checkpoint {
        kind: SMALL_BACKBONE_KIND.into(),
        meta: json!({
            "widths": net.blocks.iter().map(|b| b.conv.out_channels).collect::<Vec<_>>(),
            "kernel": 3,
            "weights_layout": "(kernel_row, kernel_col, in_channel) x out_channel",
            "feature_order": "row-major (height, width, channel)",
        }),
        tensors,
    })
}

pub fn small_backbone_from_checkpoint(ck: &Checkpoint) -> Result<SmallConvNet, CheckpointError> {
    ck.expect_kind(SMALL_BACKBONE_KIND)?;
    let mut net = SmallConvNet::zeros();
    for (i, b) in net.blocks.iter_mut().enumerate() {
        let w = ck.matrix(&format!("block{}.weights", i + 1))?;
        let bias = ck.vector(&format!("block{}.bias", i + 1))?;
        if w.dim() != b.conv.weights.dim() || bias.len() != b.conv.bias.len() {
            return Err(CheckpointError::Format(format!(
                "block {} has shape {:?}, expected {:?}",
                i + 1,
                w.dim(),
                b.conv.weights.dim()
            )));
        }
        b.conv = Conv2d {
            weights: w,
            bias,
            ..b.conv.clone()
        };
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn head() -> HeadCheckpoint {
        let mut params = ClassifierParams::new(12, &[5, 3], 4, 0.35, 99).unwrap();
        params.layers[1].bias[2] = -0.1 / 3.0;
        params.layers[0].weights[[3, 1]] = f64::MIN_POSITIVE;
        HeadCheckpoint {
            params,
            class_names: crate::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            backbone_hash: "abc".into(),
        }
    }

    #[test]
    fn head_round_trip_is_exact() {
        let h = head();
        let bytes = h.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = HeadCheckpoint::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn backbone_round_trip_is_exact() {
        let net = SmallConvNet::he_init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        small_backbone_to_checkpoint(&net).unwrap().save(&path).unwrap();
        let back = small_backbone_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = head().to_checkpoint().unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let ck = head().to_checkpoint().unwrap();
        assert!(matches!(
            small_backbone_from_checkpoint(&ck),
            Err(CheckpointError::Kind { .. })
        ));
    }
}
