//! Specimen detection on microscope plate photographs.
//!
//! The detector is two passes of blur, threshold and connected-component
//! labelling. The first pass finds the bright metallic frame around the
//! plate and paints it over with the background median; the second pass
//! finds the specimens themselves. Survivors of the area filter are cut out
//! of the original colour plate as 224×224 crops centred on their binary
//! centroid.

mod detect;
mod filter;
pub mod io;
mod labeling;
mod threshold;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detect::{detect, detect_specimens, remove_border, Detection, DetectionConfig};
pub use filter::{gaussian_blur, gaussian_kernel, to_grayscale};
pub use labeling::{connected_components, measure_candidates};
pub use threshold::{otsu, threshold, OtsuResult, ThresholdMethod};

use crate::CROP_SIZE;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("histogram is degenerate (all pixels fall in one bin)")]
    DegenerateHistogram,
    #[error("image is {height}x{width}, expected at least {min}x{min}")]
    TooSmall { height: u32, width: u32, min: u32 },
    #[error("specimen image must be {CROP_SIZE}x{CROP_SIZE}, got {height}x{width}")]
    BadSpecimenSize { height: u32, width: u32 },
    #[error("gray values must lie in [0, 1]")]
    OutOfRange,
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A full colour microscope plate photograph.
#[derive(Debug, Clone, PartialEq)]
pub struct Plate {
    pub id: String,
    pixels: RgbImage,
}

impl Plate {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Result<Self, ImagingError> {
        if pixels.height() < CROP_SIZE || pixels.width() < CROP_SIZE {
            return Err(ImagingError::TooSmall {
                height: pixels.height(),
                width: pixels.width(),
                min: CROP_SIZE,
            });
        }
        Ok(Self { id: id.into(), pixels })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }
}

/// Real-valued single channel image with values in `[0, 1]`, indexed `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    data: Array2<f64>,
}

impl GrayImage {
    pub fn new(data: Array2<f64>) -> Result<Self, ImagingError> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImagingError::OutOfRange);
        }
        Ok(Self { data })
    }

    /// Wraps data already known to be in range.
    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        debug_assert!(data.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        Self { data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self, ImagingError> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// Foreground mask produced by thresholding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub pixels: Array2<bool>,
}

impl BinaryMask {
    pub fn new(pixels: Array2<bool>) -> Self {
        Self { pixels }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

/// Pixel adjacency used by the labeller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Connected-component labels; `0` is background, components are `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub labels: Array2<u32>,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.top as f64
            && row <= (self.top + self.height - 1) as f64
            && col >= self.left as f64
            && col <= (self.left + self.width - 1) as f64
    }
}

/// A measured connected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: u32,
    pub area: usize,
    /// Binary centroid as `(row, col)`.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// A 224×224 colour crop around one detected specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenImage {
    pixels: RgbImage,
    pub source_plate: String,
    pub centroid: (f64, f64),
}

impl SpecimenImage {
    pub fn new(pixels: RgbImage, source_plate: impl Into<String>, centroid: (f64, f64)) -> Result<Self, ImagingError> {
        if pixels.width() != CROP_SIZE || pixels.height() != CROP_SIZE {
            return Err(ImagingError::BadSpecimenSize {
                height: pixels.height(),
                width: pixels.width(),
            });
        }
        Ok(Self {
            pixels,
            source_plate: source_plate.into(),
            centroid,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    /// Same provenance, new pixel content.
    pub fn with_pixels(&self, pixels: RgbImage) -> Result<Self, ImagingError> {
        Self::new(pixels, self.source_plate.clone(), self.centroid)
    }
}
