use ndarray::Array2;

use super::{GrayImage, ImagingError, Plate};

/// ITU-R BT.601 luma, scaled to `[0, 1]`.
pub fn to_grayscale(plate: &Plate) -> GrayImage {
    let px = plate.pixels();
    let (w, h) = (px.width() as usize, px.height() as usize);
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        let [red, green, blue] = px.get_pixel(c as u32, r as u32).0;
        let y = (0.299 * f64::from(red) + 0.587 * f64::from(green) + 0.114 * f64::from(blue)) / 255.0;
        y.clamp(0.0, 1.0)
    });
    GrayImage::from_trusted(data)
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, ImagingError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ImagingError::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage, ImagingError> {
    let taps = gaussian_kernel(sigma)?;
    let radius = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let src = img.data();

    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut horiz = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = clamp(c as isize + k as isize - radius, w);
                acc += t * src[[r, cc]];
            }
            horiz[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = clamp(r as isize + k as isize - radius, h);
                acc += t * horiz[[rr, c]];
            }
            out[[r, c]] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(GrayImage::from_trusted(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn plate_of(color: [u8; 3]) -> Plate {
        Plate::new("p", RgbImage::from_pixel(224, 224, Rgb(color))).unwrap()
    }

    #[test]
    fn black_plate_is_zero() {
        let g = to_grayscale(&plate_of([0, 0, 0]));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_plate_is_one() {
        let g = to_grayscale(&plate_of([255, 255, 255]));
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pure_red_weight() {
        let g = to_grayscale(&plate_of([255, 0, 0]));
        assert!((g.get(0, 0) - 0.299).abs() < 1e-12);
    }

    #[test]
    fn kernel_normalised() {
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // 2-D weights are the outer product, so they are normalised too.
        let total: f64 = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let img = GrayImage::constant(5, 5, 0.5).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
        assert!(gaussian_blur(&img, f64::NAN).is_err());
    }

    #[test]
    fn constant_image_unchanged() {
        for sigma in [0.3, 1.0, 2.5] {
            let img = GrayImage::constant(20, 13, 0.37).unwrap();
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-9));
        }
    }

    /// Dense 2-D convolution with clamped coordinates.
    fn dense_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                kernel.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
        let total: f64 = kernel.iter().map(|k| k.2).sum();
        let (h, w) = src.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            kernel
                .iter()
                .map(|&(dy, dx, k)| {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    k / total * src[[yy, xx]]
                })
                .sum()
        })
    }

    #[test]
    fn impulse_response_matches_dense_oracle() {
        let mut data = Array2::zeros((9, 9));
        data[[4, 4]] = 1.0;
        let img = GrayImage::new(data.clone()).unwrap();
        let out = gaussian_blur(&img, 1.0).unwrap();
        let oracle = dense_blur(&data, 1.0);
        let k = gaussian_kernel(1.0).unwrap();
        let centre = k[3] * k[3];
        assert!((out.get(4, 4) - centre).abs() < 1e-12);
        assert!((oracle[[4, 4]] - centre).abs() < 1e-12);
        for (a, b) in out.data().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_image_matches_dense_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((17, 23), |_| rng.gen::<f64>());
        let out = gaussian_blur(&GrayImage::new(data.clone()).unwrap(), 1.7).unwrap();
        let oracle = dense_blur(&data, 1.7);
        for (a, b) in out.data().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
