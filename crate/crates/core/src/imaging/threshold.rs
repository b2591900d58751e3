use serde::{Deserialize, Serialize};

use super::{BinaryMask, GrayImage, ImagingError};

const BINS: usize = 256;

/// How the foreground cut-off is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Fixed(f64),
    Otsu,
}

/// Otsu's threshold together with the mean intensity on either side of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    pub mean_below: f64,
    pub mean_above: f64,
}

/// Bin `k` covers `(k/256, (k+1)/256]`, bin 0 also holds exact zeros, so
/// `v <= (k+1)/256` exactly when `bin(v) <= k`.
fn bin_of(v: f64) -> usize {
    let b = (v * BINS as f64).ceil() as i64 - 1;
    b.clamp(0, BINS as i64 - 1) as usize
}

/// Otsu's method over 256 uniform bins on `[0, 1]`.
pub fn otsu(img: &GrayImage) -> Result<OtsuResult, ImagingError> {
    let mut counts = [0usize; BINS];
    let mut sums = [0.0f64; BINS];
    for &v in img.data() {
        let b = bin_of(v);
        counts[b] += 1;
        sums[b] += v;
    }
    let total: usize = counts.iter().sum();
    let grand: f64 = sums.iter().sum();
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ImagingError::DegenerateHistogram);
    }

    let mut best: Option<(f64, usize, f64, f64)> = None;
    let (mut n0, mut s0) = (0usize, 0.0f64);
    for k in 0..BINS - 1 {
        n0 += counts[k];
        s0 += sums[k];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let w0 = n0 as f64 / total as f64;
        let w1 = 1.0 - w0;
        let mu0 = s0 / n0 as f64;
        let mu1 = (grand - s0) / n1 as f64;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|b| between > b.0) {
            best = Some((between, k, mu0, mu1));
        }
    }
    let (_, k, mean_below, mean_above) = best.ok_or(ImagingError::DegenerateHistogram)?;
    Ok(OtsuResult {
        threshold: (k + 1) as f64 / BINS as f64,
        mean_below,
        mean_above,
    })
}

/// `mask[p] = img[p] > t`.
pub fn threshold(img: &GrayImage, method: ThresholdMethod) -> Result<BinaryMask, ImagingError> {
    let t = match method {
        ThresholdMethod::Fixed(t) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(ImagingError::InvalidParameter(format!(
                    "fixed threshold must be in [0, 1], got {t}"
                )));
            }
            t
        }
        ThresholdMethod::Otsu => otsu(img)?.threshold,
    };
    Ok(BinaryMask::new(img.data().mapv(|v| v > t)))
}
