//! PNG input/output and the JSON-lines detection sidecar.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Detection, ImagingError, Plate};
use crate::fsutil::write_atomic;

/// Reads an 8-bit RGB or grayscale PNG as a plate named after its file stem.
pub fn read_plate(path: &Path) -> Result<Plate, ImagingError> {
    let img = read_rgb(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Plate::new(id, img)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, ImagingError> {
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| ImagingError::Decode {
        path: path.display().to_string(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImagingError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| ImagingError::Decode {
            path: "<memory>".into(),
            source,
        })?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), ImagingError> {
    write_atomic(path, &encode_png(img)?)?;
    Ok(())
}

/// One line of the detection sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub plate_id: String,
    pub index: usize,
    pub file: String,
    pub centroid: (f64, f64),
    pub area: usize,
    pub bbox: BoundingBox,
}

impl DetectionRecord {
    pub fn new(detection: &Detection, index: usize, file: impl Into<String>) -> Self {
        Self {
            plate_id: detection.specimen.source_plate.clone(),
            index,
            file: file.into(),
            centroid: detection.candidate.centroid,
            area: detection.candidate.area,
            bbox: detection.candidate.bbox,
        }
    }
}

/// Crop file name `<plate_id>_<index>.png`.
pub fn specimen_file_name(plate_id: &str, index: usize) -> String {
    format!("{plate_id}_{index}.png")
}

pub fn to_json_lines(records: &[DetectionRecord]) -> Result<String, ImagingError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_json_lines(text: &str) -> Result<Vec<DetectionRecord>, ImagingError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ImagingError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn grayscale_png_is_promoted_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_pixel(230, 240, image::Luma([77]))
            .save(&path)
            .unwrap();
        let plate = read_plate(&path).unwrap();
        assert_eq!(plate.id, "g");
        assert_eq!(plate.pixels().get_pixel(3, 3), &Rgb([77, 77, 77]));
    }

    #[test]
    fn corrupt_png_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_plate(&path), Err(ImagingError::Decode { .. })));
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        write_png(&path, &img).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), img);
    }

    #[test]
    fn json_lines_round_trip() {
        let rec = DetectionRecord {
            plate_id: "p1".into(),
            index: 0,
            file: "p1_0.png".into(),
            centroid: (10.5, 20.25),
            area: 1500,
            bbox: BoundingBox {
                top: 1,
                left: 2,
                height: 30,
                width: 40,
            },
        };
        let text = to_json_lines(&[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(parse_json_lines(&text).unwrap(), vec![rec.clone(), rec]);
    }
}
