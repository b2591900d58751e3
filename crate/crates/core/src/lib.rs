//! Microfossil specimen extraction, classification and uncertainty analysis.
//!
//! The crate is organised as a pipeline:
//!
//! * [`imaging`] finds specimen candidates on microscope plate photographs
//!   (blur, threshold, connected components) and cuts 224×224 crops.
//! * [`dataset`] holds labelled specimen manifests, stratified splitting,
//!   augmentation, batching and a procedural plate generator.
//! * [`backbone`] turns crops into feature vectors, either through a
//!   user-supplied pretrained interchange graph or a small built-in
//!   convolutional network that can also be fine-tuned.
//! * [`nn`] is the dense classification head with hand-written
//!   backpropagation, dropout, optimizers, early stopping and grid search.
//! * [`uncertainty`] runs Monte Carlo dropout and turns the stochastic
//!   predictions into means, variances, vote tallies and review flags.
//! * [`cli`] wires everything into the `microfossil` command.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod fsutil;
pub mod imaging;
pub mod nn;
pub mod seed;
pub mod uncertainty;

/// Class names in class-id order.
pub const CLASS_NAMES: [&str; 4] = ["planktic", "calcareous_benthic", "agglutinated_benthic", "sediment"];

/// Number of output classes.
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Side length of every specimen crop.
pub const CROP_SIZE: u32 = 224;
