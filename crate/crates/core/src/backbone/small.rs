//! The built-in five-block convolutional backbone.
//!
//! Each block is a 3×3 same-padded convolution, ReLU and a 2×2/2 max-pool,
//! so a 224×224×3 input leaves the fifth block as 7×7×32. Features are
//! flattened row-major over `(height, width, channel)`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{Conv2d, ConvGrads, MaxPool2d, Window};
use super::BackboneError;

/// Output channels of blocks 1 to 5.
pub const SMALL_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

/// Flattened feature length, `7 * 7 * 32`.
pub const SMALL_FEATURE_LEN: usize = 7 * 7 * 32;

pub const NUM_BLOCKS: usize = SMALL_WIDTHS.len();

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub pool: MaxPool2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvNet {
    pub blocks: Vec<ConvBlock>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Index of the first cached block; earlier blocks cannot receive gradients.
    start: usize,
    inputs: Vec<Array3<f64>>,
    pre_relu: Vec<Array3<f64>>,
    argmax: Vec<Vec<usize>>,
    output_dim: (usize, usize, usize),
}

impl SmallConvNet {
    fn with_init(mut init: impl FnMut(&mut Conv2d)) -> Self {
        let mut cin = 3;
        let blocks = SMALL_WIDTHS
            .iter()
            .map(|&cout| {
                let mut conv = Conv2d::zeros(cin, cout, Window::square(3, 1, 1));
                init(&mut conv);
                cin = cout;
                ConvBlock {
                    conv,
                    pool: MaxPool2d::new(Window::square(2, 2, 0)),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn zeros() -> Self {
        Self::with_init(|_| {})
    }

    /// He-normal weights, zero biases.
    pub fn he_init<R: Rng>(rng: &mut R) -> Self {
        Self::with_init(|conv| {
            let fan_in = conv.weights.nrows() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            conv.weights.mapv_inplace(|_| normal.sample(rng));
        })
    }

    pub fn feature_len(&self) -> usize {
        SMALL_FEATURE_LEN
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>, BackboneError> {
        let mut cur = x.to_owned();
        for b in &self.blocks {
            let z = b.conv.forward(cur.view())?;
            let a = z.mapv(|v| v.max(0.0));
            cur = b.pool.forward(a.view())?.0;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, ForwardCache), BackboneError> {
        self.forward_cached_from(x, 1)
    }

    /// Forward pass that keeps activations only from block `first_block` (1-based) on.
    pub fn forward_cached_from(
        &self,
        x: ArrayView3<f64>,
        first_block: usize,
    ) -> Result<(Array3<f64>, ForwardCache), BackboneError> {
        if !(1..=NUM_BLOCKS).contains(&first_block) {
            return Err(BackboneError::Shape(format!("no block {first_block}")));
        }
        let start = first_block - 1;
        let mut cache = ForwardCache {
            start,
            inputs: Vec::with_capacity(NUM_BLOCKS - start),
            pre_relu: Vec::with_capacity(NUM_BLOCKS - start),
            argmax: Vec::with_capacity(NUM_BLOCKS - start),
            output_dim: (0, 0, 0),
        };
        let mut cur = x.to_owned();
        for (idx, b) in self.blocks.iter().enumerate() {
            let z = b.conv.forward(cur.view())?;
            let a = z.mapv(|v| v.max(0.0));
            let (pooled, argmax) = b.pool.forward(a.view())?;
            if idx >= start {
                cache.inputs.push(cur);
                cache.pre_relu.push(z);
                cache.argmax.push(argmax);
            }
            cur = pooled;
        }
        cache.output_dim = cur.dim();
        Ok((cur, cache))
    }

    /// Parameter gradients for the blocks in `trainable` (ids `1..=5`), given
    /// the gradient of the loss with respect to the flattened features.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: &[f64],
        trainable: &BTreeSet<usize>,
    ) -> Result<Vec<Option<ConvGrads>>, BackboneError> {
        let mut out: Vec<Option<ConvGrads>> = vec![None; NUM_BLOCKS];
        let Some(&first) = trainable.iter().next() else {
            return Ok(out);
        };
        if first < cache.start + 1 || trainable.iter().any(|&b| b > NUM_BLOCKS) {
            return Err(BackboneError::Shape(format!(
                "trainable blocks {trainable:?} are not covered by a cache starting at block {}",
                cache.start + 1
            )));
        }
        let mut grad = Array3::from_shape_vec(cache.output_dim, grad_features.to_vec())
            .map_err(|e| BackboneError::Shape(e.to_string()))?;
        for idx in (first - 1..NUM_BLOCKS).rev() {
            let block = &self.blocks[idx];
            let c = idx - cache.start;
            let z = &cache.pre_relu[c];
            let mut dz = MaxPool2d::backward(z.dim(), &cache.argmax[c], &grad);
            dz.zip_mut_with(z, |g, &zv| {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            });
            let need_input = idx + 1 > first;
            let (g, dx) = block.conv.backward(cache.inputs[c].view(), &dz, need_input)?;
            if trainable.contains(&(idx + 1)) {
                out[idx] = Some(g);
            }
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        Ok(out)
    }

    /// Flat parameter slices of one block, weights then bias.
    pub fn block_params_mut(&mut self, block_id: usize) -> [&mut [f64]; 2] {
        let conv = &mut self.blocks[block_id - 1].conv;
        [
            conv.weights.as_slice_mut().expect("standard layout"),
            conv.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn block_param_sizes(&self, block_id: usize) -> [usize; 2] {
        let conv = &self.blocks[block_id - 1].conv;
        [conv.weights.len(), conv.bias.len()]
    }
}

/// Flattens a `(h, w, c)` map row-major.
pub fn flatten(map: &Array3<f64>) -> Array1<f64> {
    map.as_standard_layout().iter().copied().collect()
}
