//! Procedural microscope plates with known ground truth.
//!
//! Each class has its own silhouette and texture: lobed chambers (planktic),
//! ringed disks (calcareous benthic), speckled ellipses (agglutinated
//! benthic) and clusters of angular grains (sediment). Every silhouette is
//! star-shaped about its centre, so scaling it up only ever adds pixels and
//! a binary search on the scale hits a requested area.

use std::f64::consts::TAU;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::imaging::Plate;
use crate::{seed, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub class: usize,
    /// Requested pixel area.
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub id: String,
    pub height: u32,
    pub width: u32,
    pub blobs: Vec<BlobSpec>,
    /// Width of the bright frame; `0` draws none.
    pub frame_width: u32,
    /// Background gray level.
    pub background: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
    /// Minimum free space between neighbouring blobs.
    pub gap: f64,
    /// Upper bound of the per-specimen pull of tint and texture contrast
    /// toward a shared appearance, in `[0, 1]`; `0` keeps classes distinct.
    pub difficulty: f64,
}

impl PlateSpec {
    pub fn blank(id: impl Into<String>, height: u32, width: u32) -> Self {
        Self {
            id: id.into(),
            height,
            width,
            blobs: Vec::new(),
            frame_width: 12,
            background: 0.1,
            noise: 0.02,
            gap: 10.0,
            difficulty: 0.0,
        }
    }
}

/// Exact rendered geometry of one blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTruth {
    pub class: usize,
    /// Mean `(row, col)` of the rendered pixels.
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Debug, Clone)]
enum Shape {
    Lobed {
        lobes: f64,
        amp: f64,
        phase: f64,
    },
    Ringed {
        aspect: f64,
        angle: f64,
        rings: f64,
    },
    Ellipse {
        aspect: f64,
        angle: f64,
    },
    Grains {
        polys: Vec<Vec<(f64, f64)>>,
        facets: Vec<f64>,
    },
}

fn rotate(y: f64, x: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * y - s * x, s * y + c * x)
}

fn in_convex(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    // Vertices are counter-clockwise in (x, y).
    (0..poly.len()).all(|i| {
        let (y0, x0) = poly[i];
        let (y1, x1) = poly[(i + 1) % poly.len()];
        (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
    })
}

impl Shape {
    fn sample<R: Rng>(class: usize, rng: &mut R) -> Self {
        match class {
            0 => Shape::Lobed {
                lobes: f64::from(rng.gen_range(3..=5)),
                amp: rng.gen_range(0.18..0.28),
                phase: rng.gen_range(0.0..TAU),
            },
            1 => Shape::Ringed {
                aspect: rng.gen_range(0.85..1.0),
                angle: rng.gen_range(0.0..TAU),
                rings: rng.gen_range(2.5..4.0),
            },
            2 => Shape::Ellipse {
                aspect: rng.gen_range(0.5..0.7),
                angle: rng.gen_range(0.0..TAU),
            },
            _ => {
                let n = rng.gen_range(2..=3);
                let polys = (0..n)
                    .map(|_| {
                        let k = rng.gen_range(5..=7);
                        let offset = rng.gen_range(0.0..TAU);
                        let stretch = rng.gen_range(0.55..1.0);
                        let tilt = rng.gen_range(0.0..TAU);
                        (0..k)
                            .map(|i| {
                                let t = offset + TAU * (i as f64 + rng.gen_range(-0.3..0.3)) / k as f64;
                                let r = rng.gen_range(0.7..1.0);
                                rotate(r * t.sin() * stretch, r * t.cos(), tilt)
                            })
                            .collect::<Vec<_>>()
                    })
                    .map(|mut p| {
                        // Keep counter-clockwise order after the stretch and tilt.
                        p.sort_by(|a, b| a.0.atan2(a.1).total_cmp(&b.0.atan2(b.1)));
                        p
                    })
                    .collect();
                let facets = (0..n).map(|_| rng.gen_range(0.62..0.9)).collect();
                Shape::Grains { polys, facets }
            }
        }
    }

    /// Bound on distance from the centre in unit coordinates.
    fn reach(&self) -> f64 {
        match self {
            Shape::Lobed { amp, .. } => 1.0 + amp,
            _ => 1.0,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Lobed { lobes, amp, phase } => {
                let theta = y.atan2(x);
                (y * y + x * x).sqrt() <= 1.0 + amp * (lobes * theta + phase).cos()
            }
            Shape::Ringed { aspect, angle, .. } | Shape::Ellipse { aspect, angle } => {
                let (u, v) = rotate(y, x, *angle);
                (u / aspect).powi(2) + v * v <= 1.0
            }
            Shape::Grains { polys, .. } => polys.iter().any(|p| in_convex(p, y, x)),
        }
    }

    /// Texture value at unit coordinates inside the silhouette.
    fn texture<R: Rng>(&self, y: f64, x: f64, rng: &mut R) -> f64 {
        let rho = (y * y + x * x).sqrt();
        match self {
            Shape::Lobed { lobes, amp, phase } => {
                let theta = y.atan2(x);
                let t = rho / (1.0 + amp * (lobes * theta + phase).cos());
                let suture = (0.5 * (lobes * theta + phase)).sin().abs();
                0.93 - 0.2 * t * t - 0.1 * (1.0 - suture).powi(8)
            }
            Shape::Ringed { aspect, angle, rings } => {
                let (u, v) = rotate(y, x, *angle);
                let r = ((u / aspect).powi(2) + v * v).sqrt();
                0.76 + 0.16 * (TAU * rings * r).cos()
            }
            Shape::Ellipse { .. } => 0.72 + rng.gen_range(-0.15..0.15),
            Shape::Grains { polys, facets } => {
                let f = polys
                    .iter()
                    .zip(facets)
                    .find(|(p, _)| in_convex(p, y, x))
                    .map_or(facets[0], |(_, &f)| f);
                f + rng.gen_range(-0.03..0.03)
            }
        }
    }
}

/// Pixel offsets `(dy, dx)` covered at `scale` with the centre offset by `frac`.
fn footprint(shape: &Shape, scale: f64, frac: (f64, f64)) -> Vec<(i64, i64)> {
    let reach = (shape.reach() * scale).ceil() as i64 + 1;
    let mut px = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let y = (dy as f64 - frac.0) / scale;
            let x = (dx as f64 - frac.1) / scale;
            if shape.contains(y, x) {
                px.push((dy, dx));
            }
        }
    }
    px
}

/// Scale whose footprint is closest to `area` pixels.
fn fit_scale(shape: &Shape, area: usize, frac: (f64, f64)) -> f64 {
    let (mut lo, mut hi) = (0.5, 4.0 * (area as f64).sqrt().max(2.0));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if footprint(shape, mid, frac).len() < area {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let below = footprint(shape, lo, frac).len();
    let above = footprint(shape, hi, frac).len();
    if area.abs_diff(below) < area.abs_diff(above) {
        lo
    } else {
        hi
    }
}

/// Per-class colour tint applied to the gray texture.
const TINTS: [[f64; 3]; NUM_CLASSES] = [[1.0, 1.0, 0.96], [1.0, 0.95, 0.86], [1.0, 0.86, 0.7], [0.9, 0.94, 1.0]];

const SHARED_TINT: [f64; 3] = [0.975, 0.94, 0.88];
const SHARED_GRAY: f64 = 0.78;

struct Placed {
    shape: Shape,
    class: usize,
    scale: f64,
    centre: (i64, i64),
    frac: (f64, f64),
    radius: f64,
}

/// Renders `spec` and returns the plate with the exact geometry of every blob.
///
/// Blobs keep at least `spec.gap` pixels between their bounding circles and
/// stay clear of the frame. Placement gives up after a bounded number of
/// attempts per blob.
pub fn generate_synthetic(spec: &PlateSpec, seed: u64) -> Result<(Plate, Vec<BlobTruth>), DatasetError> {
    const ATTEMPTS: usize = 2000;
    if spec.blobs.iter().any(|b| b.class >= NUM_CLASSES || b.area == 0) {
        return Err(DatasetError::Config("blob class out of range or zero area".into()));
    }
    let (h, w) = (i64::from(spec.height), i64::from(spec.width));
    let margin = f64::from(spec.frame_width) + spec.gap;
    let mut placed: Vec<Placed> = Vec::with_capacity(spec.blobs.len());
    for (k, blob) in spec.blobs.iter().enumerate() {
        let mut rng = seed::stream(seed, "blob", &[k as u64]);
        let shape = Shape::sample(blob.class, &mut rng);
        let frac = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let scale = fit_scale(&shape, blob.area, frac);
        let radius = shape.reach() * scale + 1.5;
        let mut spot = None;
        for _ in 0..ATTEMPTS {
            let lo = margin + radius;
            let (max_y, max_x) = (h as f64 - lo, w as f64 - lo);
            if max_y <= lo || max_x <= lo {
                break;
            }
            let cy = rng.gen_range(lo..max_y).floor() as i64;
            let cx = rng.gen_range(lo..max_x).floor() as i64;
            let clear = placed.iter().all(|p| {
                let d = (((cy - p.centre.0).pow(2) + (cx - p.centre.1).pow(2)) as f64).sqrt();
                d >= radius + p.radius + spec.gap
            });
            if clear {
                spot = Some((cy, cx));
                break;
            }
        }
        let Some(centre) = spot else {
            return Err(DatasetError::Placement {
                requested: spec.blobs.len(),
                attempts: ATTEMPTS,
            });
        };
        placed.push(Placed {
            shape,
            class: blob.class,
            scale,
            centre,
            frac,
            radius,
        });
    }

    let mut plate_rng = seed::stream(seed, "plate", &[]);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| DatasetError::Config(e.to_string()))?;
    let fw = i64::from(spec.frame_width);
    let mut gray = vec![0.0f64; (h * w) as usize];
    let mut tint = vec![[1.0f64; 3]; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let edge = y.min(x).min(h - 1 - y).min(w - 1 - x);
            gray[(y * w + x) as usize] = if edge < fw {
                // Brushed metal: bright with a faint grain along the edge.
                0.82 + 0.06 * ((y + x) as f64 * 0.7).sin()
            } else {
                spec.background
            };
        }
    }
    let mut truths = Vec::with_capacity(placed.len());
    for (k, p) in placed.iter().enumerate() {
        let mut tex_rng = seed::stream(seed, "texture", &[k as u64]);
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        let pull = if spec.difficulty > 0.0 {
            spec.difficulty.min(1.0) * tex_rng.gen::<f64>()
        } else {
            0.0
        };
        let own = TINTS[p.class];
        let blob_tint = [0, 1, 2].map(|c| own[c] + pull * (SHARED_TINT[c] - own[c]));
        for (dy, dx) in footprint(&p.shape, p.scale, p.frac) {
            let (y, x) = (p.centre.0 + dy, p.centre.1 + dx);
            let uy = (dy as f64 - p.frac.0) / p.scale;
            let ux = (dx as f64 - p.frac.1) / p.scale;
            let v = p.shape.texture(uy, ux, &mut tex_rng);
            let i = (y * w + x) as usize;
            gray[i] = v + pull * (SHARED_GRAY - v);
            tint[i] = blob_tint;
            sy += y as f64;
            sx += x as f64;
            n += 1;
        }
        truths.push(BlobTruth {
            class: p.class,
            centroid: (sy / n as f64, sx / n as f64),
            area: n,
        });
    }
    let img = RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let i = (i64::from(y) * w + i64::from(x)) as usize;
        let base = gray[i];
        let t = tint[i];
        let e = noise.sample(&mut plate_rng);
        Rgb([0, 1, 2].map(|c| ((base * t[c] + e) * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    Ok((Plate::new(spec.id.clone(), img)?, truths))
}

/// Layout of a generated benchmark: each plate holds specimens of the
/// classes it is given plus small debris that detection should ignore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub plates_per_class: usize,
    pub height: u32,
    pub width: u32,
    pub specimens_per_plate: usize,
    pub debris_per_plate: usize,
    /// Inclusive pixel-area range of specimens.
    pub specimen_area: (usize, usize),
    /// Inclusive pixel-area range of debris.
    pub debris_area: (usize, usize),
    /// Appearance overlap between classes, see [`PlateSpec::difficulty`].
    pub difficulty: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            plates_per_class: 23,
            height: 1024,
            width: 1024,
            specimens_per_plate: 24,
            debris_per_plate: 6,
            specimen_area: (1400, 5000),
            debris_area: (120, 800),
            difficulty: 0.6,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let ok_range = |(lo, hi): (usize, usize)| lo > 0 && lo <= hi;
        if !ok_range(self.specimen_area) || !ok_range(self.debris_area) {
            return Err(DatasetError::Config(
                "area ranges must be non-empty and positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(DatasetError::Config("difficulty must lie in [0, 1]".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(DatasetError::Config("plate size must be positive".into()));
        }
        Ok(())
    }
}

/// Plate `index` of a benchmark: specimen classes drawn uniformly from
/// `classes`, debris of any class, all from the `layout` stream of `seed`.
pub fn benchmark_plate_spec(
    id: impl Into<String>,
    classes: &[usize],
    cfg: &BenchmarkConfig,
    seed: u64,
    index: u64,
) -> PlateSpec {
    let mut rng = seed::stream(seed, "layout", &[index]);
    let mut spec = PlateSpec::blank(id, cfg.height, cfg.width);
    spec.difficulty = cfg.difficulty;
    let (slo, shi) = cfg.specimen_area;
    let (dlo, dhi) = cfg.debris_area;
    for _ in 0..cfg.specimens_per_plate {
        let class = classes[rng.gen_range(0..classes.len())];
        spec.blobs.push(BlobSpec {
            class,
            area: rng.gen_range(slo..=shi),
        });
    }
    for _ in 0..cfg.debris_per_plate {
        spec.blobs.push(BlobSpec {
            class: rng.gen_range(0..NUM_CLASSES),
            area: rng.gen_range(dlo..=dhi),
        });
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{detect, DetectionConfig};

    #[test]
    fn no_blobs_gives_blank_plate() {
        let mut spec = PlateSpec::blank("b", 300, 320);
        spec.frame_width = 0;
        spec.noise = 0.0;
        let (plate, truth) = generate_synthetic(&spec, 1).unwrap();
        assert!(truth.is_empty());
        let v = (0.1f64 * 255.0).round() as u8;
        assert!(plate.pixels().pixels().all(|p| p.0 == [v, v, v]));
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut spec = PlateSpec::blank("s", 400, 400);
        spec.blobs = (0..4).map(|c| BlobSpec { class: c, area: 1500 }).collect();
        let a = generate_synthetic(&spec, 7).unwrap();
        let b = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a.0.pixels().as_raw(), b.0.pixels().as_raw());
        assert_eq!(a.1, b.1);
        let c = generate_synthetic(&spec, 8).unwrap();
        assert_ne!(a.0.pixels().as_raw(), c.0.pixels().as_raw());
    }

    #[test]
    fn rendered_area_matches_request_for_every_class() {
        for class in 0..NUM_CLASSES {
            let mut spec = PlateSpec::blank("a", 300, 300);
            spec.blobs = vec![BlobSpec { class, area: 2000 }];
            let (_, truth) = generate_synthetic(&spec, class as u64).unwrap();
            let got = truth[0].area as f64;
            assert!((got - 2000.0).abs() / 2000.0 < 0.02, "class {class}: {got}");
        }
    }

    #[test]
    fn detected_area_within_ten_percent() {
        for class in 0..NUM_CLASSES {
            let mut spec = PlateSpec::blank("d", 320, 320);
            spec.blobs = vec![BlobSpec { class, area: 2000 }];
            let (plate, truth) = generate_synthetic(&spec, 40 + class as u64).unwrap();
            let found = detect(&plate, &DetectionConfig::default()).unwrap();
            assert_eq!(found.len(), 1, "class {class}");
            let area = found[0].candidate.area as f64;
            assert!((area - 2000.0).abs() / 2000.0 <= 0.10, "class {class}: {area}");
            let (cy, cx) = found[0].candidate.centroid;
            let (ty, tx) = truth[0].centroid;
            assert!(((cy - ty).powi(2) + (cx - tx).powi(2)).sqrt() <= 3.0);
        }
    }

    #[test]
    fn blobs_do_not_overlap() {
        let mut spec = PlateSpec::blank("o", 600, 600);
        spec.blobs = (0..10)
            .map(|i| BlobSpec {
                class: i % 4,
                area: 1500 + 200 * i,
            })
            .collect();
        let (plate, truth) = generate_synthetic(&spec, 3).unwrap();
        let total: usize = truth.iter().map(|t| t.area).sum();
        let found = detect(&plate, &DetectionConfig::default()).unwrap();
        assert_eq!(found.len(), 10);
        let detected: usize = found.iter().map(|d| d.candidate.area).sum();
        assert!((detected as f64 - total as f64).abs() / (total as f64) < 0.1);
    }

    #[test]
    fn impossible_layout_is_a_placement_error() {
        let mut spec = PlateSpec::blank("x", 230, 230);
        spec.blobs = vec![BlobSpec { class: 0, area: 4000 }; 6];
        assert!(matches!(
            generate_synthetic(&spec, 1),
            Err(DatasetError::Placement { .. })
        ));
    }

    #[test]
    fn default_benchmark_plate_is_placeable_and_detectable() {
        let cfg = BenchmarkConfig::default();
        let spec = benchmark_plate_spec("bench", &[2], &cfg, 3, 0);
        assert_eq!(spec.blobs.len(), 30);
        assert!(spec.blobs[..24].iter().all(|b| b.class == 2));
        let (plate, truth) = generate_synthetic(&spec, 3).unwrap();
        let found = detect(&plate, &DetectionConfig::default()).unwrap();
        let big = truth.iter().filter(|t| t.area >= 1024).count();
        assert_eq!(found.len(), big);
        assert!(big >= 24);
        assert_eq!(spec, benchmark_plate_spec("bench", &[2], &cfg, 3, 0));
        assert_ne!(spec, benchmark_plate_spec("bench", &[2], &cfg, 3, 1));
    }
}
