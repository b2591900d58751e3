//! Random flips, quarter turns and colour jitter.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::SpecimenImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub rot90: bool,
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    pub saturation_delta: f64,
    /// Fraction of the hue circle.
    pub hue_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            rot90: true,
            brightness_delta: 0.10,
            contrast_delta: 0.10,
            saturation_delta: 0.10,
            hue_delta: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            rot90: false,
            brightness_delta: 0.0,
            contrast_delta: 0.0,
            saturation_delta: 0.0,
            hue_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, d) in [
            ("brightness_delta", self.brightness_delta),
            ("contrast_delta", self.contrast_delta),
            ("saturation_delta", self.saturation_delta),
            ("hue_delta", self.hue_delta),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(format!("{name} must be in [0, 1], got {d}"));
            }
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue offset as a fraction of the circle.
    pub hue_shift: f64,
}

fn factor<R: Rng>(rng: &mut R, delta: f64) -> f64 {
    if delta == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - delta..=1.0 + delta)
    }
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        quarter_turns: 0,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = cfg.hflip && rng.gen_bool(0.5);
        let quarter_turns = if cfg.rot90 { rng.gen_range(0..4u8) } else { 0 };
        let brightness = factor(rng, cfg.brightness_delta);
        let contrast = factor(rng, cfg.contrast_delta);
        let saturation = factor(rng, cfg.saturation_delta);
        let hue_shift = if cfg.hue_delta == 0.0 {
            0.0
        } else {
            rng.gen_range(-cfg.hue_delta..=cfg.hue_delta)
        };
        Self {
            flip,
            quarter_turns,
            brightness,
            contrast,
            saturation,
            hue_shift,
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = if self.flip {
            imageops::flip_horizontal(img)
        } else {
            img.clone()
        };
        out = match self.quarter_turns % 4 {
            1 => imageops::rotate270(&out),
            2 => imageops::rotate180(&out),
            3 => imageops::rotate90(&out),
            _ => out,
        };
        let colour_identity =
            self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0 && self.hue_shift == 0.0;
        if !colour_identity {
            jitter(&mut out, self);
        }
        out
    }
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Brightness, contrast, saturation, then hue, in that order, on 0..255 reals.
fn jitter(img: &mut RgbImage, p: &AugmentParams) {
    let n = f64::from(img.width() * img.height());
    let mean_luma = img
        .pixels()
        .map(|px| luma(px.0.map(f64::from)) * p.brightness)
        .sum::<f64>()
        / n;
    for px in img.pixels_mut() {
        let mut c = px.0.map(|v| f64::from(v) * p.brightness);
        c = c.map(|v| (v - mean_luma) * p.contrast + mean_luma);
        let g = luma(c);
        c = c.map(|v| g + (v - g) * p.saturation);
        if p.hue_shift != 0.0 {
            let clamped = c.map(|v| v.clamp(0.0, 255.0) / 255.0);
            let (h, s, v) = rgb_to_hsv(clamped);
            c = hsv_to_rgb((h + p.hue_shift).rem_euclid(1.0), s, v).map(|x| x * 255.0);
        }
        *px = Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
}

/// RGB in `[0, 1]` to `(hue in [0, 1), saturation, value)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h.rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws fresh parameters from `cfg` and applies them. Labels are untouched
/// because only pixels move.
pub fn augment<R: Rng>(img: &SpecimenImage, cfg: &AugmentConfig, rng: &mut R) -> SpecimenImage {
    let params = AugmentParams::sample(cfg, rng);
    img.with_pixels(params.apply(img.pixels()))
        .expect("augmentation preserves square crops")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;

    fn noise(seed: u64) -> SpecimenImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = RgbImage::from_fn(224, 224, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        SpecimenImage::new(px, "p", (0.0, 0.0)).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = noise(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn four_quarter_turns_and_two_flips_are_identity() {
        let img = noise(3).into_pixels();
        let turn = AugmentParams {
            quarter_turns: 1,
            ..AugmentParams::IDENTITY
        };
        let mut x = img.clone();
        for _ in 0..4 {
            x = turn.apply(&x);
        }
        assert_eq!(x, img);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        assert_ne!(turn.apply(&img), img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let mut img = RgbImage::new(224, 224);
        img.put_pixel(223, 0, Rgb([255, 0, 0]));
        let turned = AugmentParams {
            quarter_turns: 1,
            ..AugmentParams::IDENTITY
        }
        .apply(&img);
        assert_eq!(turned.get_pixel(0, 0), &Rgb([255, 0, 0]));
    }

    #[test]
    fn brightness_scales_uniform_image() {
        let img = RgbImage::from_pixel(224, 224, Rgb([100, 100, 100]));
        let p = AugmentParams {
            brightness: 1.10,
            ..AugmentParams::IDENTITY
        };
        assert!(p.apply(&img).pixels().all(|px| px.0 == [110, 110, 110]));
        let bright = RgbImage::from_pixel(224, 224, Rgb([250, 250, 250]));
        assert!(p.apply(&bright).pixels().all(|px| px.0 == [255, 255, 255]));
    }

    #[test]
    fn contrast_and_saturation_by_hand() {
        let mut img = RgbImage::from_pixel(224, 224, Rgb([100, 100, 100]));
        img.put_pixel(0, 0, Rgb([200, 100, 50]));
        let p = AugmentParams {
            contrast: 1.1,
            ..AugmentParams::IDENTITY
        };
        let out = p.apply(&img);
        let n = 224.0 * 224.0;
        let mean = (luma([200.0, 100.0, 50.0]) + (n - 1.0) * 100.0) / n;
        let expect = |v: f64| ((v - mean) * 1.1 + mean).round() as u8;
        assert_eq!(out.get_pixel(0, 0).0, [expect(200.0), expect(100.0), expect(50.0)]);

        let s = AugmentParams {
            saturation: 0.0,
            ..AugmentParams::IDENTITY
        };
        let g = luma([200.0, 100.0, 50.0]).round() as u8;
        assert_eq!(s.apply(&img).get_pixel(0, 0).0, [g, g, g]);
    }

    #[test]
    fn hue_wraps_around() {
        let img = RgbImage::from_pixel(224, 224, Rgb([255, 0, 0]));
        let p = AugmentParams {
            hue_shift: -1.0 / 3.0,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(p.apply(&img).get_pixel(5, 5).0, [0, 0, 255]);
        let (h, _, _) = rgb_to_hsv([1.0, 0.0, 0.05]);
        assert!(h > 0.99);
    }

    #[test]
    fn sampled_factors_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = AugmentParams::sample(&cfg, &mut rng);
            for f in [p.brightness, p.contrast, p.saturation] {
                assert!((0.9..=1.1).contains(&f));
            }
            assert!(p.hue_shift.abs() <= 0.05);
            assert!(p.quarter_turns < 4);
        }
    }

    #[test]
    fn default_augment_keeps_size_and_provenance() {
        let img = noise(4);
        let out = augment(
            &img,
            &AugmentConfig::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(5),
        );
        assert_eq!(out.pixels().dimensions(), (224, 224));
        assert_eq!(out.source_plate, img.source_plate);
    }

    proptest! {
        #[test]
        fn hsv_round_trip_within_one_level(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let rgb = [r, g, b].map(|v| f64::from(v) / 255.0);
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v).map(|x| (x * 255.0).round() as i32);
            for (a, o) in back.iter().zip([r, g, b]) {
                prop_assert!((a - i32::from(o)).abs() <= 1);
            }
        }
    }
}
