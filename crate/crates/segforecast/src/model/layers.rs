//! Trainable layer primitives with hand-rolled forward/backward passes.
//!
//! Feature maps are `(C, H, W)`; temporal stacks are `(C, T, H, W)`.
//! Convolutions run as im2col + GEMM over bounded row chunks so peak
//! memory stays flat at full resolution.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Gradients, ParamKind, ParamVisit};

pub type Feature = Array3<f64>;
pub type Volume = Array4<f64>;

/// Upper bound on the im2col scratch buffer, in f64 elements (~32 MB).
const MAX_COL_ELEMS: usize = 4 << 20;

pub(crate) fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// 2D convolution (stride 1)
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: Array4<f64>, // (c_out, c_in, k, k)
    pub bias: Array1<f64>,
    pub padding: usize,
    path: String,
}

impl Conv2d {
    pub fn init(
        path: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = he_init(rng, &[c_out, c_in, kernel, kernel], fan_in)
            .into_dimensionality()
            .unwrap();
        Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            padding,
            path,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Feature) -> Feature {
        let (c_in, h, w) = x.dim();
        let (c_out, wc_in, kh, kw) = self.weight.dim();
        assert_eq!(c_in, wc_in, "conv {}: input channel mismatch", self.path);
        let p = self.padding;
        let h_out = h + 2 * p + 1 - kh;
        let w_out = w + 2 * p + 1 - kw;
        let k = c_in * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .unwrap();
        let mut y = Array3::zeros((c_out, h_out, w_out));
        let chunk = chunk_rows(k, w_out, h_out);
        let mut patches = Array2::zeros((k, chunk * w_out));
        let mut y_chunk = Array2::zeros((c_out, chunk * w_out));
        let mut y0 = 0;
        while y0 < h_out {
            let y1 = (y0 + chunk).min(h_out);
            let np = (y1 - y0) * w_out;
            let mut pv = patches.slice_mut(s![.., ..np]);
            pv.fill(0.0);
            fill_patches2d(x, pv.view_mut().as_slice_mut().unwrap(), y0, y1, kh, kw, p);
            let mut yv = y_chunk.slice_mut(s![.., ..np]);
            general_mat_mul(1.0, &w2, &patches.slice(s![.., ..np]), 0.0, &mut yv);
            for co in 0..c_out {
                let b = self.bias[co];
                let dst = &mut y.as_slice_mut().unwrap()
                    [(co * h_out + y0) * w_out..(co * h_out + y1) * w_out];
                let src = yv.row(co);
                let src = src.as_slice().unwrap();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
            y0 = y1;
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient
    /// (skipped when `need_dx` is false, e.g. at the first layer).
    pub fn backward(
        &self,
        x: &Feature,
        gy: &Feature,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Feature> {
        let (c_in, h, w) = x.dim();
        let (c_out, _, kh, kw) = self.weight.dim();
        let p = self.padding;
        let (gc, h_out, w_out) = gy.dim();
        assert_eq!(gc, c_out, "conv {}: grad channel mismatch", self.path);
        let k = c_in * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .unwrap();

        let mut dw2: Array2<f64> = Array2::zeros((c_out, k));
        let db = gy.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
        let mut dx = need_dx.then(|| Array3::zeros((c_in, h, w)));

        let chunk = chunk_rows(k, w_out, h_out);
        let mut patches = Array2::zeros((k, chunk * w_out));
        let mut dcol = Array2::zeros((k, chunk * w_out));
        let mut y0 = 0;
        while y0 < h_out {
            let y1 = (y0 + chunk).min(h_out);
            let np = (y1 - y0) * w_out;
            let mut pv = patches.slice_mut(s![.., ..np]);
            pv.fill(0.0);
            fill_patches2d(x, pv.view_mut().as_slice_mut().unwrap(), y0, y1, kh, kw, p);
            let gyc = gy
                .slice(s![.., y0..y1, ..])
                .to_owned()
                .into_shape_with_order((c_out, np))
                .unwrap();
            general_mat_mul(1.0, &gyc, &patches.slice(s![.., ..np]).t(), 1.0, &mut dw2);
            if let Some(dx) = dx.as_mut() {
                let mut dcv = dcol.slice_mut(s![.., ..np]);
                general_mat_mul(1.0, &w2.t(), &gyc, 0.0, &mut dcv);
                col2im_add2d(
                    dcv.view().as_slice().unwrap(),
                    dx,
                    y0,
                    y1,
                    kh,
                    kw,
                    p,
                );
            }
            y0 = y1;
        }
        grads.add(
            &format!("{}.weight", self.path),
            dw2.into_shape_with_order((c_out, c_in, kh, kw))
                .unwrap()
                .into_dyn()
                .view(),
        );
        grads.add(&format!("{}.bias", self.path), db.into_dyn().view());
        dx
    }
}

impl ParamVisit for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view().into_dyn(),
        );
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view_mut().into_dyn(),
        );
    }
}

fn chunk_rows(k: usize, w_out: usize, h_out: usize) -> usize {
    (MAX_COL_ELEMS / (k * w_out).max(1)).clamp(1, h_out.max(1))
}

/// Write im2col patches for output rows `[y0, y1)` into `patches`
/// (row-major `(k, (y1-y0)*w_out)`, already zeroed).
fn fill_patches2d(
    x: &Feature,
    patches: &mut [f64],
    y0: usize,
    y1: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let (c_in, h, w) = x.dim();
    let w_out = w + 2 * pad + 1 - kw;
    let np = (y1 - y0) * w_out;
    let xs = x.as_slice().unwrap();
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(w_out);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w + (ox_lo + kx - pad);
                    let dst_base = r * np + (oy - y0) * w_out + ox_lo;
                    let n = ox_hi - ox_lo;
                    patches[dst_base..dst_base + n]
                        .copy_from_slice(&xs[src_base..src_base + n]);
                }
            }
        }
    }
}

/// Scatter-add the column gradient for output rows `[y0, y1)` back into `dx`.
fn col2im_add2d(
    dcol: &[f64],
    dx: &mut Feature,
    y0: usize,
    y1: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let (c_in, h, w) = dx.dim();
    let w_out = w + 2 * pad + 1 - kw;
    let np = (y1 - y0) * w_out;
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(w_out);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w + (ox_lo + kx - pad);
                    let src_base = r * np + (oy - y0) * w_out + ox_lo;
                    for i in 0..(ox_hi - ox_lo) {
                        dxs[dst_base + i] += dcol[src_base + i];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transpose convolution, kernel 2, stride 2 (exact 2x upsampling)
// ---------------------------------------------------------------------------

pub struct ConvTranspose2d {
    pub weight: Array4<f64>, // (c_in, c_out, 2, 2)
    pub bias: Array1<f64>,
    path: String,
}

impl ConvTranspose2d {
    pub fn init(path: String, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = he_init(rng, &[c_in, c_out, 2, 2], c_in * 4)
            .into_dimensionality()
            .unwrap();
        ConvTranspose2d {
            weight,
            bias: Array1::zeros(c_out),
            path,
        }
    }

    pub fn forward(&self, x: &Feature) -> Feature {
        let (c_in, h, w) = x.dim();
        let (wc_in, c_out, _, _) = self.weight.dim();
        assert_eq!(c_in, wc_in, "tconv {}: input channel mismatch", self.path);
        let x2 = x.view().into_shape_with_order((c_in, h * w)).unwrap();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 4))
            .unwrap();
        let y4 = w2.t().dot(&x2); // (c_out*4, h*w)
        let mut y = Array3::zeros((c_out, 2 * h, 2 * w));
        let ys = y.as_slice_mut().unwrap();
        let y4s = y4.as_slice().unwrap();
        for co in 0..c_out {
            let b = self.bias[co];
            for dy in 0..2 {
                for dx in 0..2 {
                    let src_row = (co * 4 + dy * 2 + dx) * (h * w);
                    for i in 0..h {
                        let dst = (co * 2 * h + 2 * i + dy) * 2 * w + dx;
                        let src = src_row + i * w;
                        for j in 0..w {
                            ys[dst + 2 * j] = y4s[src + j] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Feature, gy: &Feature, grads: &mut Gradients) -> Feature {
        let (c_in, h, w) = x.dim();
        let (_, c_out, _, _) = self.weight.dim();
        assert_eq!(gy.dim(), (c_out, 2 * h, 2 * w));
        // Gather gy into the (c_out*4, h*w) layout the forward scattered from.
        let mut g4 = Array2::zeros((c_out * 4, h * w));
        {
            let g4s = g4.as_slice_mut().unwrap();
            let gys = gy.as_slice().unwrap();
            for co in 0..c_out {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst_row = (co * 4 + dy * 2 + dx) * (h * w);
                        for i in 0..h {
                            let src = (co * 2 * h + 2 * i + dy) * 2 * w + dx;
                            let dst = dst_row + i * w;
                            for j in 0..w {
                                g4s[dst + j] = gys[src + 2 * j];
                            }
                        }
                    }
                }
            }
        }
        let x2 = x.view().into_shape_with_order((c_in, h * w)).unwrap();
        let dw2 = x2.dot(&g4.t()); // (c_in, c_out*4)
        let db = gy.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * 4))
            .unwrap();
        let dx = w2
            .dot(&g4)
            .into_shape_with_order((c_in, h, w))
            .unwrap();
        grads.add(
            &format!("{}.weight", self.path),
            dw2.into_shape_with_order((c_in, c_out, 2, 2))
                .unwrap()
                .into_dyn()
                .view(),
        );
        grads.add(&format!("{}.bias", self.path), db.into_dyn().view());
        dx
    }
}

impl ParamVisit for ConvTranspose2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view().into_dyn(),
        );
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view_mut().into_dyn(),
        );
    }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2
// ---------------------------------------------------------------------------

pub struct PoolCache {
    /// Winner offset per output pixel, encoded as dy*2+dx.
    pub idx: Array3<u8>,
    pub in_shape: (usize, usize, usize),
}

pub fn maxpool2_forward(x: &Feature) -> (Feature, PoolCache) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pool input must have even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, ho, wo));
    let mut idx = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = x[[ci, 2 * i, 2 * j]];
                let mut code = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[[ci, 2 * i + dy, 2 * j + dx]];
                        if v > best {
                            best = v;
                            code = (dy * 2 + dx) as u8;
                        }
                    }
                }
                y[[ci, i, j]] = best;
                idx[[ci, i, j]] = code;
            }
        }
    }
    (
        y,
        PoolCache {
            idx,
            in_shape: (c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, gy: &Feature) -> Feature {
    let (c, h, w) = cache.in_shape;
    let mut gx = Array3::zeros((c, h, w));
    let (_, ho, wo) = gy.dim();
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let code = cache.idx[[ci, i, j]] as usize;
                gx[[ci, 2 * i + code / 2, 2 * j + code % 2]] += gy[[ci, i, j]];
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Batch normalization (per-channel statistics over all non-channel axes)
// ---------------------------------------------------------------------------

/// Per-channel normalization. In training mode the statistics come from the
/// sample itself (mean/variance over every non-channel position); evaluation
/// mode uses the running statistics accumulated by the training loop.
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    path: String,
}

pub struct BnCache {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    xhat: Vec<f64>,
}

impl BatchNorm {
    pub fn init(path: String, channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            path,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// x must be standard layout with the channel as the leading axis.
    pub fn forward_train(&self, x: &[f64]) -> (Vec<f64>, BnCache) {
        let c = self.channels();
        let m = x.len() / c;
        assert_eq!(x.len(), c * m);
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let row = &x[ci * m..(ci + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let v = row.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / m as f64;
            mean[ci] = mu;
            var[ci] = v;
            let inv = 1.0 / (v + self.eps).sqrt();
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            for i in 0..m {
                let xh = (row[i] - mu) * inv;
                xhat[ci * m + i] = xh;
                y[ci * m + i] = g * xh + b;
            }
        }
        (y, BnCache { mean, var, xhat })
    }

    pub fn forward_eval(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels();
        let m = x.len() / c;
        let mut y = vec![0.0; x.len()];
        for ci in 0..c {
            let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (g, b, mu) = (self.gamma[ci], self.beta[ci], self.running_mean[ci]);
            for i in 0..m {
                y[ci * m + i] = g * (x[ci * m + i] - mu) * inv + b;
            }
        }
        y
    }

    pub fn backward(&self, cache: &BnCache, gy: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let c = self.channels();
        let m = gy.len() / c;
        let mf = m as f64;
        let mut gx = vec![0.0; gy.len()];
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ci in 0..c {
            let gyr = &gy[ci * m..(ci + 1) * m];
            let xhr = &cache.xhat[ci * m..(ci + 1) * m];
            let sgy: f64 = gyr.iter().sum();
            let sgyx: f64 = gyr.iter().zip(xhr).map(|(a, b)| a * b).sum();
            dgamma[ci] = sgyx;
            dbeta[ci] = sgy;
            let coef = self.gamma[ci] / (cache.var[ci] + self.eps).sqrt();
            let a = sgy / mf;
            let b = sgyx / mf;
            for i in 0..m {
                gx[ci * m + i] = coef * (gyr[i] - a - xhr[i] * b);
            }
        }
        grads.add(&format!("{}.gamma", self.path), dgamma.into_dyn().view());
        grads.add(&format!("{}.beta", self.path), dbeta.into_dyn().view());
        gx
    }

    /// Fold a batch-averaged statistic into the running estimates.
    pub fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>) {
        let m = self.momentum;
        for ci in 0..self.channels() {
            self.running_mean[ci] = (1.0 - m) * self.running_mean[ci] + m * mean[ci];
            self.running_var[ci] = (1.0 - m) * self.running_var[ci] + m * var[ci];
        }
    }
}

impl ParamVisit for BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        f(
            &format!("{}.gamma", self.path),
            ParamKind::Trainable,
            self.gamma.view().into_dyn(),
        );
        f(
            &format!("{}.beta", self.path),
            ParamKind::Trainable,
            self.beta.view().into_dyn(),
        );
        f(
            &format!("{}.running_mean", self.path),
            ParamKind::Buffer,
            self.running_mean.view().into_dyn(),
        );
        f(
            &format!("{}.running_var", self.path),
            ParamKind::Buffer,
            self.running_var.view().into_dyn(),
        );
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        f(
            &format!("{}.gamma", self.path),
            ParamKind::Trainable,
            self.gamma.view_mut().into_dyn(),
        );
        f(
            &format!("{}.beta", self.path),
            ParamKind::Trainable,
            self.beta.view_mut().into_dyn(),
        );
        f(
            &format!("{}.running_mean", self.path),
            ParamKind::Buffer,
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            &format!("{}.running_var", self.path),
            ParamKind::Buffer,
            self.running_var.view_mut().into_dyn(),
        );
    }
}

// ---------------------------------------------------------------------------
// 3D convolution over (C, T, H, W), stride 1
// ---------------------------------------------------------------------------

pub struct Conv3d {
    pub weight: ndarray::Array5<f64>, // (c_out, c_in, kt, k, k)
    pub bias: Array1<f64>,
    pub pad_t: usize,
    pub pad_s: usize,
    path: String,
}

impl Conv3d {
    pub fn init(
        path: String,
        c_in: usize,
        c_out: usize,
        kt: usize,
        k: usize,
        pad_t: usize,
        pad_s: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kt * k * k;
        let weight = he_init(rng, &[c_out, c_in, kt, k, k], fan_in)
            .into_dimensionality()
            .unwrap();
        Conv3d {
            weight,
            bias: Array1::zeros(c_out),
            pad_t,
            pad_s,
            path,
        }
    }

    pub fn out_t(&self, t_in: usize) -> usize {
        let kt = self.weight.dim().2;
        t_in + 2 * self.pad_t + 1 - kt
    }

    pub fn forward(&self, x: &Volume) -> Volume {
        let (c_in, t, h, w) = x.dim();
        let (c_out, wc_in, kt, kh, kw) = self.weight.dim();
        assert_eq!(c_in, wc_in, "conv3d {}: input channel mismatch", self.path);
        let (pt, ps) = (self.pad_t, self.pad_s);
        let t_out = t + 2 * pt + 1 - kt;
        let h_out = h + 2 * ps + 1 - kh;
        let w_out = w + 2 * ps + 1 - kw;
        let k = c_in * kt * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .unwrap();
        let mut y = Volume::zeros((c_out, t_out, h_out, w_out));
        let chunk = chunk_rows(k, w_out, h_out);
        let mut patches = Array2::zeros((k, chunk * w_out));
        let mut y_chunk = Array2::zeros((c_out, chunk * w_out));
        for ot in 0..t_out {
            let mut y0 = 0;
            while y0 < h_out {
                let y1 = (y0 + chunk).min(h_out);
                let np = (y1 - y0) * w_out;
                let mut pv = patches.slice_mut(s![.., ..np]);
                pv.fill(0.0);
                fill_patches3d(
                    x,
                    pv.view_mut().as_slice_mut().unwrap(),
                    ot,
                    y0,
                    y1,
                    kt,
                    kh,
                    kw,
                    pt,
                    ps,
                );
                let mut yv = y_chunk.slice_mut(s![.., ..np]);
                general_mat_mul(1.0, &w2, &patches.slice(s![.., ..np]), 0.0, &mut yv);
                for co in 0..c_out {
                    let b = self.bias[co];
                    let dst_base = ((co * t_out + ot) * h_out + y0) * w_out;
                    let dst = &mut y.as_slice_mut().unwrap()[dst_base..dst_base + np];
                    for (d, s) in dst.iter_mut().zip(yv.row(co).as_slice().unwrap()) {
                        *d = s + b;
                    }
                }
                y0 = y1;
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &Volume,
        gy: &Volume,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Volume> {
        let (c_in, t, h, w) = x.dim();
        let (c_out, _, kt, kh, kw) = self.weight.dim();
        let (pt, ps) = (self.pad_t, self.pad_s);
        let (gco, t_out, h_out, w_out) = gy.dim();
        assert_eq!(gco, c_out);
        let k = c_in * kt * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .unwrap();
        let mut dw2: Array2<f64> = Array2::zeros((c_out, k));
        let db = gy
            .sum_axis(ndarray::Axis(3))
            .sum_axis(ndarray::Axis(2))
            .sum_axis(ndarray::Axis(1));
        let mut dx = need_dx.then(|| Volume::zeros((c_in, t, h, w)));
        let chunk = chunk_rows(k, w_out, h_out);
        let mut patches = Array2::zeros((k, chunk * w_out));
        let mut dcol = Array2::zeros((k, chunk * w_out));
        for ot in 0..t_out {
            let mut y0 = 0;
            while y0 < h_out {
                let y1 = (y0 + chunk).min(h_out);
                let np = (y1 - y0) * w_out;
                let mut pv = patches.slice_mut(s![.., ..np]);
                pv.fill(0.0);
                fill_patches3d(
                    x,
                    pv.view_mut().as_slice_mut().unwrap(),
                    ot,
                    y0,
                    y1,
                    kt,
                    kh,
                    kw,
                    pt,
                    ps,
                );
                let gyc = gy
                    .slice(s![.., ot, y0..y1, ..])
                    .to_owned()
                    .into_shape_with_order((c_out, np))
                    .unwrap();
                general_mat_mul(1.0, &gyc, &patches.slice(s![.., ..np]).t(), 1.0, &mut dw2);
                if let Some(dx) = dx.as_mut() {
                    let mut dcv = dcol.slice_mut(s![.., ..np]);
                    general_mat_mul(1.0, &w2.t(), &gyc, 0.0, &mut dcv);
                    col2im_add3d(
                        dcv.view().as_slice().unwrap(),
                        dx,
                        ot,
                        y0,
                        y1,
                        kt,
                        kh,
                        kw,
                        pt,
                        ps,
                    );
                }
                y0 = y1;
            }
        }
        grads.add(
            &format!("{}.weight", self.path),
            dw2.into_shape_with_order((c_out, c_in, kt, kh, kw))
                .unwrap()
                .into_dyn()
                .view(),
        );
        grads.add(&format!("{}.bias", self.path), db.into_dyn().view());
        dx
    }
}

impl ParamVisit for Conv3d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view().into_dyn(),
        );
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        f(
            &format!("{}.weight", self.path),
            ParamKind::Trainable,
            self.weight.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            ParamKind::Trainable,
            self.bias.view_mut().into_dyn(),
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_patches3d(
    x: &Volume,
    patches: &mut [f64],
    ot: usize,
    y0: usize,
    y1: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_s: usize,
) {
    let (c_in, t, h, w) = x.dim();
    let w_out = w + 2 * pad_s + 1 - kw;
    let np = (y1 - y0) * w_out;
    let xs = x.as_slice().unwrap();
    for ci in 0..c_in {
        for ktt in 0..kt {
            let it = ot as isize + ktt as isize - pad_t as isize;
            if it < 0 || it >= t as isize {
                continue;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = ((ci * kt + ktt) * kh + ky) * kw + kx;
                    let ox_lo = pad_s.saturating_sub(kx);
                    let ox_hi = (w + pad_s - kx).min(w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy as isize + ky as isize - pad_s as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base =
                            ((ci * t + it as usize) * h + iy as usize) * w + (ox_lo + kx - pad_s);
                        let dst_base = r * np + (oy - y0) * w_out + ox_lo;
                        let n = ox_hi - ox_lo;
                        patches[dst_base..dst_base + n]
                            .copy_from_slice(&xs[src_base..src_base + n]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add3d(
    dcol: &[f64],
    dx: &mut Volume,
    ot: usize,
    y0: usize,
    y1: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_s: usize,
) {
    let (c_in, t, h, w) = dx.dim();
    let w_out = w + 2 * pad_s + 1 - kw;
    let np = (y1 - y0) * w_out;
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c_in {
        for ktt in 0..kt {
            let it = ot as isize + ktt as isize - pad_t as isize;
            if it < 0 || it >= t as isize {
                continue;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = ((ci * kt + ktt) * kh + ky) * kw + kx;
                    let ox_lo = pad_s.saturating_sub(kx);
                    let ox_hi = (w + pad_s - kx).min(w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy as isize + ky as isize - pad_s as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base =
                            ((ci * t + it as usize) * h + iy as usize) * w + (ox_lo + kx - pad_s);
                        let src_base = r * np + (oy - y0) * w_out + ox_lo;
                        for i in 0..(ox_hi - ox_lo) {
                            dxs[dst_base + i] += dcol[src_base + i];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// ReLU helpers
// ---------------------------------------------------------------------------

pub fn relu_slice(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mask `gy` by the sign of the pre-activation input.
pub fn relu_backward_slice(gy: &mut [f64], pre: &[f64]) {
    for (g, p) in gy.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Array::from_shape_vec(
            IxDyn(shape),
            (0..shape.iter().product::<usize>())
                .map(|_| n.sample(rng))
                .collect(),
        )
        .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    const H: f64 = 1e-6;

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::init("c".into(), 3, 4, 3, 1, &mut rng);
        let mut x: Array3<f64> = randn(&mut rng, &[3, 6, 5]).into_dimensionality().unwrap();
        let probe: Array3<f64> = randn(&mut rng, &[4, 6, 5]).into_dimensionality().unwrap();
        let eval = |c: &Conv2d, x: &Array3<f64>, p: &Array3<f64>| (&c.forward(x) * p).sum();

        let mut grads = Gradients::new();
        let dx = conv.backward(&x, &probe, &mut grads, true).unwrap();
        let dw = grads.get("c.weight").unwrap().clone();
        let db = grads.get("c.bias").unwrap().clone();

        for _ in 0..12 {
            let idx = [
                rng.random_range(0..4),
                rng.random_range(0..3),
                rng.random_range(0..3),
                rng.random_range(0..3),
            ];
            conv.weight[idx] += H;
            let up = eval(&conv, &x, &probe);
            conv.weight[idx] -= 2.0 * H;
            let down = eval(&conv, &x, &probe);
            conv.weight[idx] += H;
            let num = (up - down) / (2.0 * H);
            assert!(rel_err(num, dw[IxDyn(&idx)]) < 1e-6, "weight grad mismatch");
        }
        for ci in 0..4 {
            conv.bias[ci] += H;
            let up = eval(&conv, &x, &probe);
            conv.bias[ci] -= 2.0 * H;
            let down = eval(&conv, &x, &probe);
            conv.bias[ci] += H;
            let num = (up - down) / (2.0 * H);
            assert!(rel_err(num, db[IxDyn(&[ci])]) < 1e-6, "bias grad mismatch");
        }
        for _ in 0..12 {
            let idx = [
                rng.random_range(0..3),
                rng.random_range(0..6),
                rng.random_range(0..5),
            ];
            x[idx] += H;
            let up = eval(&conv, &x, &probe);
            x[idx] -= 2.0 * H;
            let down = eval(&conv, &x, &probe);
            x[idx] += H;
            let num = (up - down) / (2.0 * H);
            assert!(rel_err(num, dx[idx]) < 1e-6, "input grad mismatch");
        }
    }

    #[test]
    fn conv2d_1x1_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::init("c".into(), 5, 2, 1, 0, &mut rng);
        let x: Array3<f64> = randn(&mut rng, &[5, 4, 7]).into_dimensionality().unwrap();
        assert_eq!(conv.forward(&x).dim(), (2, 4, 7));
    }

    #[test]
    fn conv2d_chunked_equals_whole() {
        // A tall input forces multiple im2col chunks only when the buffer cap
        // is tiny; emulate by comparing against a direct naive convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::init("c".into(), 2, 3, 3, 1, &mut rng);
        let x: Array3<f64> = randn(&mut rng, &[2, 9, 7]).into_dimensionality().unwrap();
        let y = conv.forward(&x);
        let (c_out, h, w) = y.dim();
        for co in 0..c_out {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = conv.bias[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky - 1;
                                let ix = ox as isize + kx - 1;
                                if iy >= 0 && iy < 9 && ix >= 0 && ix < 7 {
                                    acc += conv.weight[[co, ci, ky as usize, kx as usize]]
                                        * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[co, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tconv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = ConvTranspose2d::init("t".into(), 3, 2, &mut rng);
        let mut x: Array3<f64> = randn(&mut rng, &[3, 4, 5]).into_dimensionality().unwrap();
        let probe: Array3<f64> = randn(&mut rng, &[2, 8, 10]).into_dimensionality().unwrap();
        assert_eq!(t.forward(&x).dim(), (2, 8, 10));
        let eval =
            |t: &ConvTranspose2d, x: &Array3<f64>, p: &Array3<f64>| (&t.forward(x) * p).sum();

        let mut grads = Gradients::new();
        let dx = t.backward(&x, &probe, &mut grads);
        let dw = grads.get("t.weight").unwrap().clone();

        for _ in 0..10 {
            let idx = [
                rng.random_range(0..3),
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(0..2),
            ];
            t.weight[idx] += H;
            let up = eval(&t, &x, &probe);
            t.weight[idx] -= 2.0 * H;
            let down = eval(&t, &x, &probe);
            t.weight[idx] += H;
            assert!(rel_err((up - down) / (2.0 * H), dw[IxDyn(&idx)]) < 1e-6);
        }
        for _ in 0..10 {
            let idx = [
                rng.random_range(0..3),
                rng.random_range(0..4),
                rng.random_range(0..5),
            ];
            x[idx] += H;
            let up = eval(&t, &x, &probe);
            x[idx] -= 2.0 * H;
            let down = eval(&t, &x, &probe);
            x[idx] += H;
            assert!(rel_err((up - down) / (2.0 * H), dx[idx]) < 1e-6);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut x = Array3::zeros((1, 4, 4));
        x[[0, 0, 1]] = 5.0;
        x[[0, 2, 2]] = -1.0;
        x[[0, 3, 3]] = 2.0;
        let (y, cache) = maxpool2_forward(&x);
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 2.0);
        let mut gy = Array3::zeros((1, 2, 2));
        gy[[0, 0, 0]] = 1.0;
        gy[[0, 1, 1]] = 3.0;
        let gx = maxpool2_backward(&cache, &gy);
        assert_eq!(gx[[0, 0, 1]], 1.0);
        assert_eq!(gx[[0, 3, 3]], 3.0);
        assert_eq!(gx.sum(), 4.0);
    }

    #[test]
    fn maxpool_ties_pick_first_scanned() {
        let x = Array3::ones((1, 2, 2));
        let (_, cache) = maxpool2_forward(&x);
        assert_eq!(cache.idx[[0, 0, 0]], 0);
    }

    #[test]
    fn batchnorm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut bn = BatchNorm::init("bn".into(), 3);
        bn.gamma = randn(&mut rng, &[3]).into_dimensionality().unwrap();
        bn.beta = randn(&mut rng, &[3]).into_dimensionality().unwrap();
        let x = randn(&mut rng, &[3 * 10]);
        let probe = randn(&mut rng, &[3 * 10]);
        let mut xs: Vec<f64> = x.iter().copied().collect();
        let ps: Vec<f64> = probe.iter().copied().collect();

        let eval = |bn: &BatchNorm, xs: &[f64]| -> f64 {
            bn.forward_train(xs)
                .0
                .iter()
                .zip(ps.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = bn.forward_train(&xs);
        let mut grads = Gradients::new();
        let gx = bn.backward(&cache, &ps, &mut grads);
        let dgamma = grads.get("bn.gamma").unwrap().clone();
        let dbeta = grads.get("bn.beta").unwrap().clone();

        for ci in 0..3 {
            bn.gamma[ci] += H;
            let up = eval(&bn, &xs);
            bn.gamma[ci] -= 2.0 * H;
            let down = eval(&bn, &xs);
            bn.gamma[ci] += H;
            assert!(rel_err((up - down) / (2.0 * H), dgamma[IxDyn(&[ci])]) < 1e-6);

            bn.beta[ci] += H;
            let up = eval(&bn, &xs);
            bn.beta[ci] -= 2.0 * H;
            let down = eval(&bn, &xs);
            bn.beta[ci] += H;
            assert!(rel_err((up - down) / (2.0 * H), dbeta[IxDyn(&[ci])]) < 1e-6);
        }
        for i in [0usize, 7, 13, 22, 29] {
            xs[i] += H;
            let up = eval(&bn, &xs);
            xs[i] -= 2.0 * H;
            let down = eval(&bn, &xs);
            xs[i] += H;
            assert!(rel_err((up - down) / (2.0 * H), gx[i]) < 1e-5, "bn dx at {i}");
        }
    }

    #[test]
    fn batchnorm_eval_is_pure() {
        let bn = BatchNorm::init("bn".into(), 2);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(bn.forward_eval(&x), bn.forward_eval(&x));
    }

    #[test]
    fn conv3d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut conv = Conv3d::init("c3".into(), 2, 3, 3, 3, 1, 1, &mut rng);
        let mut x: Volume = randn(&mut rng, &[2, 4, 4, 5]).into_dimensionality().unwrap();
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 4, 4, 5));
        let probe: Volume = randn(&mut rng, &[3, 4, 4, 5]).into_dimensionality().unwrap();
        let eval = |c: &Conv3d, x: &Volume, p: &Volume| (&c.forward(x) * p).sum();

        let mut grads = Gradients::new();
        let dx = conv.backward(&x, &probe, &mut grads, true).unwrap();
        let dw = grads.get("c3.weight").unwrap().clone();

        for _ in 0..10 {
            let idx = [
                rng.random_range(0..3),
                rng.random_range(0..2),
                rng.random_range(0..3),
                rng.random_range(0..3),
                rng.random_range(0..3),
            ];
            conv.weight[idx] += H;
            let up = eval(&conv, &x, &probe);
            conv.weight[idx] -= 2.0 * H;
            let down = eval(&conv, &x, &probe);
            conv.weight[idx] += H;
            assert!(rel_err((up - down) / (2.0 * H), dw[IxDyn(&idx)]) < 1e-6);
        }
        for _ in 0..10 {
            let idx = [
                rng.random_range(0..2),
                rng.random_range(0..4),
                rng.random_range(0..4),
                rng.random_range(0..5),
            ];
            x[idx] += H;
            let up = eval(&conv, &x, &probe);
            x[idx] -= 2.0 * H;
            let down = eval(&conv, &x, &probe);
            x[idx] += H;
            assert!(rel_err((up - down) / (2.0 * H), dx[idx]) < 1e-6);
        }
    }

    #[test]
    fn conv3d_collapses_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let conv = Conv3d::init("c3".into(), 2, 2, 4, 3, 0, 1, &mut rng);
        let x: Volume = randn(&mut rng, &[2, 4, 6, 6]).into_dimensionality().unwrap();
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (2, 1, 6, 6));
    }
}
