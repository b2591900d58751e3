use image::imageops;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    connected_components, gaussian_blur, measure_candidates, otsu, threshold, to_grayscale, BinaryMask, Candidate,
    Connectivity, GrayImage, ImagingError, Plate, SpecimenImage, ThresholdMethod,
};
use crate::CROP_SIZE;

/// Parameters of both detection passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Blur applied before looking for the plate frame.
    pub border_sigma: f64,
    pub border_threshold: ThresholdMethod,
    /// Chebyshev radius by which the detected frame is grown before it is painted over.
    pub border_dilation: usize,
    /// Blur applied before looking for specimens.
    pub sigma: f64,
    pub threshold: ThresholdMethod,
    pub connectivity: Connectivity,
    pub min_area: usize,
    /// Otsu splits whose class means differ by less than this are treated
    /// as "no foreground" (a blank tray is only noise).
    pub min_contrast: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            border_sigma: 2.0,
            border_threshold: ThresholdMethod::Otsu,
            border_dilation: 6,
            sigma: 1.0,
            threshold: ThresholdMethod::Otsu,
            connectivity: Connectivity::Eight,
            min_area: 1024,
            min_contrast: 0.15,
        }
    }
}

/// One detected specimen: its measurements and its crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub candidate: Candidate,
    pub specimen: SpecimenImage,
}

fn foreground(img: &GrayImage, method: ThresholdMethod, min_contrast: f64) -> Result<Option<BinaryMask>, ImagingError> {
    match method {
        ThresholdMethod::Fixed(_) => threshold(img, method).map(Some),
        ThresholdMethod::Otsu => match otsu(img) {
            Err(ImagingError::DegenerateHistogram) => Ok(None),
            Err(e) => Err(e),
            Ok(res) if res.mean_above - res.mean_below < min_contrast => Ok(None),
            Ok(res) => threshold(img, ThresholdMethod::Fixed(res.threshold)).map(Some),
        },
    }
}

fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = (x as isize - r).max(0) as usize;
            let hi = (x as isize + r).min(w as isize - 1) as usize;
            rows[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = (y as isize - r).max(0) as usize;
            let hi = (y as isize + r).min(h as isize - 1) as usize;
            out[[y, x]] = (lo..=hi).any(|yy| rows[[yy, x]]);
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Grayscale plate with the metallic frame painted over.
///
/// The frame is the largest first-pass component that touches at least two
/// image edges. Its (dilated) pixels are replaced by the median of every
/// other pixel. Plates without such a component come back as plain
/// grayscale.
pub fn remove_border(plate: &Plate, cfg: &DetectionConfig) -> Result<GrayImage, ImagingError> {
    let gray = to_grayscale(plate);
    let blurred = gaussian_blur(&gray, cfg.border_sigma)?;
    let Some(mask) = foreground(&blurred, cfg.border_threshold, cfg.min_contrast)? else {
        return Ok(gray);
    };
    let cmap = connected_components(&mask, cfg.connectivity);
    let (h, w) = (gray.height(), gray.width());

    let mut best: Option<(usize, u32)> = None;
    for cand in measure_candidates(&cmap) {
        let b = cand.bbox;
        let edges = [b.top == 0, b.left == 0, b.top + b.height == h, b.left + b.width == w]
            .iter()
            .filter(|&&e| e)
            .count();
        if edges >= 2 && best.is_none_or(|(area, _)| cand.area > area) {
            best = Some((cand.area, cand.label));
        }
    }
    let Some((_, label)) = best else {
        return Ok(gray);
    };

    let frame = dilate(&cmap.labels.mapv(|l| l == label), cfg.border_dilation);
    let mut rest: Vec<f64> = gray
        .data()
        .iter()
        .zip(frame.iter())
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v)
        .collect();
    if rest.is_empty() {
        return Ok(gray);
    }
    let fill = median(&mut rest);
    let mut data = gray.into_data();
    data.zip_mut_with(&frame, |v, &f| {
        if f {
            *v = fill;
        }
    });
    Ok(GrayImage::from_trusted(data))
}

/// Top-left corner of a `CROP_SIZE` window centred on `centre`, clamped inside `len`.
fn crop_origin(centre: f64, len: u32) -> u32 {
    let half = i64::from(CROP_SIZE / 2);
    let max = i64::from(len - CROP_SIZE);
    (centre.round() as i64 - half).clamp(0, max) as u32
}

/// Full detection pipeline, keeping the candidate measurements.
pub fn detect(plate: &Plate, cfg: &DetectionConfig) -> Result<Vec<Detection>, ImagingError> {
    if plate.height() < CROP_SIZE || plate.width() < CROP_SIZE {
        return Err(ImagingError::TooSmall {
            height: plate.height(),
            width: plate.width(),
            min: CROP_SIZE,
        });
    }
    let cleaned = remove_border(plate, cfg)?;
    let blurred = gaussian_blur(&cleaned, cfg.sigma)?;
    let Some(mask) = foreground(&blurred, cfg.threshold, cfg.min_contrast)? else {
        return Ok(Vec::new());
    };
    let cmap = connected_components(&mask, cfg.connectivity);

    measure_candidates(&cmap)
        .into_iter()
        .filter(|c| c.area >= cfg.min_area)
        .map(|candidate| {
            let top = crop_origin(candidate.centroid.0, plate.height());
            let left = crop_origin(candidate.centroid.1, plate.width());
            let crop = imageops::crop_imm(plate.pixels(), left, top, CROP_SIZE, CROP_SIZE).to_image();
            let specimen = SpecimenImage::new(crop, plate.id.clone(), candidate.centroid)?;
            Ok(Detection { candidate, specimen })
        })
        .collect()
}

/// Specimen crops for every candidate with at least `min_area` pixels.
pub fn detect_specimens(plate: &Plate, cfg: &DetectionConfig) -> Result<Vec<SpecimenImage>, ImagingError> {
    Ok(detect(plate, cfg)?.into_iter().map(|d| d.specimen).collect())
}
