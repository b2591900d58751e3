//! Convolution and max-pooling on `(height, width, channel)` tensors.
//!
//! Convolution is im2col followed by a matrix product. Patches are built a
//! few output rows at a time, so even 224×224×64 inputs stay within a few
//! tens of megabytes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};

use super::BackboneError;

/// Upper bound on the number of patch-matrix elements materialised at once.
const PATCH_BUDGET: usize = 1 << 22;

/// Spatial geometry shared by convolution and pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `(top, left, bottom, right)`.
    pub pads: (usize, usize, usize, usize),
}

impl Window {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pads: (pad, pad, pad, pad),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), BackboneError> {
        let ph = h + self.pads.0 + self.pads.2;
        let pw = w + self.pads.1 + self.pads.3;
        if ph < self.kernel.0 || pw < self.kernel.1 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(BackboneError::Shape(format!(
                "window {:?} does not fit a {h}x{w} input",
                self
            )));
        }
        Ok((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }

    /// Input coordinate of window offset `k` at output position `o`, or `None` in the padding.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

/// 2-D convolution. Weights are laid out `(kh * kw * c_in, c_out)` with the
/// row index `(dy * kw + dx) * c_in + ci`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, window: Window) -> Self {
        let rows = window.kernel.0 * window.kernel.1 * in_channels;
        Self {
            weights: Array2::zeros((rows, out_channels)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            window,
        }
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<(usize, usize), BackboneError> {
        let (h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(BackboneError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.window.output_size(h, w)
    }

    fn rows_per_chunk(&self, out_w: usize) -> usize {
        let cols = self.weights.nrows();
        (PATCH_BUDGET / (cols * out_w).max(1)).max(1)
    }

    /// Patch matrix for output rows `oh0..oh1`.
    fn im2col(&self, x: &[f64], dim: (usize, usize, usize), oh0: usize, oh1: usize, out_w: usize) -> Array2<f64> {
        let (h, w, c) = dim;
        let win = self.window;
        let (kh, kw) = win.kernel;
        let cols = kh * kw * c;
        let mut patches = Array2::<f64>::zeros(((oh1 - oh0) * out_w, cols));
        let dst = patches.as_slice_mut().expect("standard layout");
        for oh in oh0..oh1 {
            for ow in 0..out_w {
                let row = &mut dst[((oh - oh0) * out_w + ow) * cols..][..cols];
                let ix0 = (ow * win.stride.1) as isize - win.pads.1 as isize;
                let interior = ix0 >= 0 && ix0 as usize + kw <= w;
                for dy in 0..kh {
                    let Some(iy) = Window::source(oh, dy, win.stride.0, win.pads.0, h) else {
                        continue;
                    };
                    let seg = &mut row[dy * kw * c..(dy + 1) * kw * c];
                    if interior {
                        let start = (iy * w + ix0 as usize) * c;
                        seg.copy_from_slice(&x[start..start + kw * c]);
                    } else {
                        for dx in 0..kw {
                            let Some(ix) = Window::source(ow, dx, win.stride.1, win.pads.1, w) else {
                                continue;
                            };
                            let start = (iy * w + ix) * c;
                            seg[dx * c..(dx + 1) * c].copy_from_slice(&x[start..start + c]);
                        }
                    }
                }
            }
        }
        patches
    }

    /// Scatter-add patch gradients back into the input gradient.
    fn col2im(&self, dpatches: &Array2<f64>, dx: &mut [f64], dim: (usize, usize, usize), oh0: usize, out_w: usize) {
        let (h, w, c) = dim;
        let win = self.window;
        let (kh, kw) = win.kernel;
        for (r, prow) in dpatches.outer_iter().enumerate() {
            let oh = oh0 + r / out_w;
            let ow = r % out_w;
            let prow = prow.to_slice().expect("standard layout");
            for dy in 0..kh {
                let Some(iy) = Window::source(oh, dy, win.stride.0, win.pads.0, h) else {
                    continue;
                };
                for dxk in 0..kw {
                    let Some(ix) = Window::source(ow, dxk, win.stride.1, win.pads.1, w) else {
                        continue;
                    };
                    let src = &prow[(dy * kw + dxk) * c..(dy * kw + dxk + 1) * c];
                    let start = (iy * w + ix) * c;
                    dx[start..start + c].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>, BackboneError> {
        let (out_h, out_w) = self.check_input(&x)?;
        let dim = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((out_h * out_w, self.out_channels));
        let step = self.rows_per_chunk(out_w);
        let mut oh0 = 0;
        while oh0 < out_h {
            let oh1 = (oh0 + step).min(out_h);
            let patches = self.im2col(xs, dim, oh0, oh1, out_w);
            let mut dst = out.slice_mut(s![oh0 * out_w..oh1 * out_w, ..]);
            general_mat_mul(1.0, &patches, &self.weights, 0.0, &mut dst);
            oh0 = oh1;
        }
        out += &self.bias;
        Ok(out
            .into_shape_with_order((out_h, out_w, self.out_channels))
            .expect("contiguous"))
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(output)` and the forward input.
    /// Returns the parameter gradients and, when `need_input` is set, `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView3<f64>,
        grad_out: &Array3<f64>,
        need_input: bool,
    ) -> Result<(ConvGrads, Option<Array3<f64>>), BackboneError> {
        let (out_h, out_w) = self.check_input(&x)?;
        if grad_out.dim() != (out_h, out_w, self.out_channels) {
            return Err(BackboneError::Shape("conv gradient shape mismatch".into()));
        }
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((out_h * out_w, self.out_channels))
            .expect("contiguous");
        let mut dw = Array2::<f64>::zeros(self.weights.raw_dim());
        let db = g.sum_axis(Axis(0));
        let dim = x.dim();
        let mut dx = need_input.then(|| Array3::<f64>::zeros(dim));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");

        let step = self.rows_per_chunk(out_w);
        let mut oh0 = 0;
        while oh0 < out_h {
            let oh1 = (oh0 + step).min(out_h);
            let patches = self.im2col(xs, dim, oh0, oh1, out_w);
            let gchunk = g.slice(s![oh0 * out_w..oh1 * out_w, ..]);
            general_mat_mul(1.0, &patches.t(), &gchunk, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dpatches = gchunk.dot(&self.weights.t());
                self.col2im(&dpatches, dx.as_slice_mut().expect("standard layout"), dim, oh0, out_w);
            }
            oh0 = oh1;
        }
        Ok((ConvGrads { weights: dw, bias: db }, dx))
    }
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: Window,
}

impl MaxPool2d {
    pub fn new(window: Window) -> Self {
        Self { window }
    }

    /// Pooled output and, per output element, the flat `(h, w, c)` index of the winning input.
    /// Ties go to the first maximum in row-major window order.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, Vec<usize>), BackboneError> {
        let (h, w, c) = x.dim();
        let (oh, ow) = self.window.output_size(h, w)?;
        let win = self.window;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
        let mut argmax = vec![usize::MAX; oh * ow * c];
        for y in 0..oh {
            for xo in 0..ow {
                let base = (y * ow + xo) * c;
                let best = &mut out[base..base + c];
                let best_idx = &mut argmax[base..base + c];
                for dy in 0..win.kernel.0 {
                    let Some(iy) = Window::source(y, dy, win.stride.0, win.pads.0, h) else {
                        continue;
                    };
                    for dx in 0..win.kernel.1 {
                        let Some(ix) = Window::source(xo, dx, win.stride.1, win.pads.1, w) else {
                            continue;
                        };
                        let start = (iy * w + ix) * c;
                        for (ch, &v) in xs[start..start + c].iter().enumerate() {
                            if v > best[ch] || best_idx[ch] == usize::MAX {
                                best[ch] = v;
                                best_idx[ch] = start + ch;
                            }
                        }
                    }
                }
            }
        }
        let out = Array3::from_shape_vec((oh, ow, c), out).expect("sized");
        Ok((out, argmax))
    }

    pub fn backward(input_dim: (usize, usize, usize), argmax: &[usize], grad_out: &Array3<f64>) -> Array3<f64> {
        let mut dx = Array3::<f64>::zeros(input_dim);
        let flat = dx.as_slice_mut().expect("standard layout");
        for (g, &i) in grad_out.iter().zip(argmax) {
            if i != usize::MAX {
                flat[i] += g;
            }
        }
        dx
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random3(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_conv(cin: usize, cout: usize, window: Window, seed: u64) -> Conv2d {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Conv2d::zeros(cin, cout, window);
        conv.weights.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        conv.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        conv
    }

    /// Six nested loops straight from the definition.
    pub(crate) fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let win = conv.window;
        let (oh, ow) = win.output_size(h, w).unwrap();
        let mut out = Array3::zeros((oh, ow, conv.out_channels));
        for y in 0..oh {
            for xo in 0..ow {
                for co in 0..conv.out_channels {
                    let mut acc = conv.bias[co];
                    for dy in 0..win.kernel.0 {
                        for dx in 0..win.kernel.1 {
                            for ci in 0..cin {
                                let iy = (y * win.stride.0 + dy) as isize - win.pads.0 as isize;
                                let ix = (xo * win.stride.1 + dx) as isize - win.pads.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wrow = (dy * win.kernel.1 + dx) * cin + ci;
                                acc += conv.weights[[wrow, co]] * x[[iy as usize, ix as usize, ci]];
                            }
                        }
                    }
                    out[[y, xo, co]] = acc;
                }
            }
        }
        out
    }

    fn naive_pool(x: &Array3<f64>, win: Window) -> Array3<f64> {
        let (h, w, c) = x.dim();
        let (oh, ow) = win.output_size(h, w).unwrap();
        Array3::from_shape_fn((oh, ow, c), |(y, xo, ch)| {
            let mut vals = Vec::new();
            for dy in 0..win.kernel.0 {
                for dx in 0..win.kernel.1 {
                    let iy = (y * win.stride.0 + dy) as isize - win.pads.0 as isize;
                    let ix = (xo * win.stride.1 + dx) as isize - win.pads.1 as isize;
                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                        vals.push(x[[iy as usize, ix as usize, ch]]);
                    }
                }
            }
            vals.into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let cases = [
            (Window::square(3, 1, 1), (9, 7, 3), 4),
            (Window::square(3, 2, 0), (11, 10, 2), 5),
            (
                Window {
                    kernel: (2, 3),
                    stride: (1, 2),
                    pads: (1, 0, 0, 2),
                },
                (6, 8, 3),
                2,
            ),
            (Window::square(1, 1, 0), (5, 5, 4), 6),
        ];
        for (i, (win, dim, cout)) in cases.into_iter().enumerate() {
            let x = random3(dim, i as u64);
            let conv = random_conv(dim.2, cout, win, 100 + i as u64);
            let fast = conv.forward(x.view()).unwrap();
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-10, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let conv = Conv2d::zeros(3, 4, Window::square(3, 1, 1));
        assert!(conv.forward(Array3::zeros((5, 5, 2)).view()).is_err());
    }

    #[test]
    fn pool_matches_naive_oracle() {
        for (i, (win, dim)) in [
            (Window::square(2, 2, 0), (8, 6, 3)),
            (Window::square(2, 2, 0), (7, 9, 2)),
            (Window::square(3, 2, 1), (9, 9, 2)),
        ]
        .into_iter()
        .enumerate()
        {
            let x = random3(dim, 40 + i as u64);
            let (fast, _) = MaxPool2d::new(win).forward(x.view()).unwrap();
            assert_eq!(fast, naive_pool(&x, win));
        }
    }

    fn check_grad(analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-9,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let win = Window::square(3, 1, 1);
        let x = random3((16, 16, 3), 9);
        let conv = random_conv(3, 4, win, 10);
        let probe = random3((16, 16, 4), 11);
        let loss = |c: &Conv2d, x: &Array3<f64>| -> f64 { (c.forward(x.view()).unwrap() * &probe).sum() };
        let (grads, dx) = conv.backward(x.view(), &probe, true).unwrap();
        let dx = dx.unwrap();
        let h = 1e-4;
        for idx in 0..conv.weights.len() {
            let (r, c) = (idx / conv.out_channels, idx % conv.out_channels);
            let mut p = conv.clone();
            p.weights[[r, c]] += h;
            let mut m = conv.clone();
            m.weights[[r, c]] -= h;
            check_grad(grads.weights[[r, c]], (loss(&p, &x) - loss(&m, &x)) / (2.0 * h));
        }
        for co in 0..4 {
            let mut p = conv.clone();
            p.bias[co] += h;
            let mut m = conv.clone();
            m.bias[co] -= h;
            check_grad(grads.bias[co], (loss(&p, &x) - loss(&m, &x)) / (2.0 * h));
        }
        for (idx, g) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            check_grad(*g, (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h));
        }
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let win = Window::square(2, 2, 0);
        let x = random3((16, 16, 3), 21);
        let pool = MaxPool2d::new(win);
        let (out, argmax) = pool.forward(x.view()).unwrap();
        let probe = random3(out.dim(), 22);
        let dx = MaxPool2d::backward(x.dim(), &argmax, &probe);
        let loss = |x: &Array3<f64>| (pool.forward(x.view()).unwrap().0 * &probe).sum();
        let h = 1e-6;
        for (idx, g) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            check_grad(*g, (loss(&xp) - loss(&xm)) / (2.0 * h));
        }
    }
}
