//! Layers with explicit forward/backward passes.
//!
//! Activations are `(N, C, H, W)`. Convolutions run through im2col and a
//! single matmul per image; transposed convolutions (kernel 2, stride 2) are
//! a matmul plus a non-overlapping scatter. Train-mode forwards cache what
//! backward needs; eval-mode forwards cache nothing and chunk large im2col
//! buffers.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand_chacha::ChaCha20Rng;

use super::{he_normal, scope, PTensor, TensorSlot, VisitTensors};
use crate::scalar::Scalar;

/// Cap on eval-mode im2col buffer elements before strip chunking kicks in.
const IM2COL_EVAL_LIMIT: usize = 4_000_000;

/// Repack into standard (C) layout if needed; concatenated arrays are not
/// always contiguous and the conv kernels index raw slices.
pub(crate) fn ensure_std4<F: Clone>(a: Array4<F>) -> Array4<F> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.dim();
        let v: Vec<F> = a.iter().cloned().collect();
        Array4::from_shape_vec(shape, v).expect("length matches shape")
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    (ic, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oy0, oy1): (usize, usize),
    ow: usize,
) -> Array2<F> {
    let rows = ic * kh * kw;
    let strip = oy1 - oy0;
    let mut col = Array2::<F>::zeros((rows, strip * ow));
    let cs = col.as_slice_mut().expect("fresh array is contiguous");
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                for oy in oy0..oy1 {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let col_base = r * strip * ow + (oy - oy0) * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[col_base + ox] = x[x_base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate<F: Scalar>(
    col: &ArrayView2<F>,
    gx: &mut [F],
    (ic, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oy0, oy1): (usize, usize),
    ow: usize,
) {
    let strip = oy1 - oy0;
    let cs = col.as_slice().expect("contiguous column buffer");
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                for oy in oy0..oy1 {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (c * h + iy as usize) * w;
                    let col_base = r * strip * ow + (oy - oy0) * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[x_base + ix as usize] += cs[col_base + ox];
                    }
                }
            }
        }
    }
}

/// 2D convolution with zero padding.
#[derive(Clone)]
pub struct Conv2d<F> {
    pub weight: PTensor<F>,
    pub bias: Option<PTensor<F>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache<F>>,
}

#[derive(Clone)]
struct ConvCache<F> {
    cols: Vec<Array2<F>>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut draw = he_normal::<F>(rng, fan_in);
        let weight = PTensor::new(
            Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), &mut draw)
                .into_dyn(),
        );
        drop(draw);
        Conv2d {
            weight,
            bias: bias.then(|| PTensor::new(Array1::<F>::zeros(out_channels).into_dyn())),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, ic, h, w) = x.dim();
        assert_eq!(ic, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let k2 = self.kernel * self.kernel;
        let w2 = self
            .weight
            .data
            .to_shape((self.out_channels, ic * k2))
            .expect("weight is contiguous");
        let mut out = Array4::<F>::zeros((n, self.out_channels, oh, ow));
        let mut cols = Vec::new();
        let strip_rows = if train {
            oh.max(1)
        } else {
            (IM2COL_EVAL_LIMIT / (ic * k2 * ow).max(1)).clamp(1, oh.max(1))
        };
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xs = xi.to_slice().expect("batch items are contiguous");
            let mut oy0 = 0;
            while oy0 < oh {
                let oy1 = (oy0 + strip_rows).min(oh);
                let col = im2col(
                    xs,
                    (ic, h, w),
                    (self.kernel, self.kernel),
                    self.stride,
                    self.pad,
                    (oy0, oy1),
                    ow,
                );
                let y = w2.dot(&col);
                let mut out_flat = out
                    .index_axis_mut(Axis(0), i)
                    .into_shape_with_order((self.out_channels, oh * ow))
                    .expect("contiguous");
                out_flat.slice_mut(s![.., oy0 * ow..oy1 * ow]).assign(&y);
                if train {
                    cols.push(col);
                }
                oy0 = oy1;
            }
        }
        if let Some(b) = &self.bias {
            for c in 0..self.out_channels {
                let bc = b.data[[c]];
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bc);
            }
        }
        if train {
            // Train mode uses a single strip per image.
            debug_assert_eq!(cols.len(), n);
            self.cache = Some(ConvCache {
                cols,
                in_dims: (ic, h, w),
                out_hw: (oh, ow),
            });
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("forward(train) before backward");
        let (ic, h, w) = cache.in_dims;
        let (oh, ow) = cache.out_hw;
        let n = gy.dim().0;
        let k2 = self.kernel * self.kernel;
        let w2 = self
            .weight
            .data
            .to_shape((self.out_channels, ic * k2))
            .expect("contiguous")
            .into_owned();
        let mut gx = Array4::<F>::zeros((n, ic, h, w));
        for i in 0..n {
            let gy_flat = gy
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous");
            let col = &cache.cols[i];
            let gw = gy_flat.dot(&col.t());
            {
                let mut gw2 = self
                    .weight
                    .grad
                    .view_mut()
                    .into_shape_with_order((self.out_channels, ic * k2))
                    .expect("contiguous");
                gw2 += &gw;
            }
            let gcol = w2.t().dot(&gy_flat);
            let mut gxi = gx.index_axis_mut(Axis(0), i);
            let gxs = gxi.as_slice_mut().expect("contiguous");
            col2im_accumulate(
                &gcol.view(),
                gxs,
                (ic, h, w),
                (self.kernel, self.kernel),
                self.stride,
                self.pad,
                (0, oh),
                ow,
            );
        }
        if let Some(b) = &mut self.bias {
            for c in 0..self.out_channels {
                let sum: F = gy.index_axis(Axis(1), c).iter().copied().sum();
                b.grad[[c]] += sum;
            }
        }
        gx
    }
}

impl<F: Scalar> VisitTensors<F> for Conv2d<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        f(
            &scope(prefix, "weight"),
            TensorSlot::Param(&mut self.weight),
        );
        if let Some(b) = &mut self.bias {
            f(&scope(prefix, "bias"), TensorSlot::Param(b));
        }
    }
}

/// Transposed convolution, kernel 2, stride 2 (exact 2x upsampling, no
/// output overlap).
#[derive(Clone)]
pub struct ConvTranspose2d<F> {
    pub weight: PTensor<F>,
    pub bias: PTensor<F>,
    in_channels: usize,
    out_channels: usize,
    cache: Option<Array4<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut draw = he_normal::<F>(rng, in_channels);
        let weight = PTensor::new(
            Array4::from_shape_simple_fn((in_channels, out_channels, 2, 2), &mut draw).into_dyn(),
        );
        drop(draw);
        ConvTranspose2d {
            weight,
            bias: PTensor::new(Array1::<F>::zeros(out_channels).into_dyn()),
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, ic, h, w) = x.dim();
        assert_eq!(ic, self.in_channels, "conv transpose input channels");
        let oc = self.out_channels;
        let w2 = self.weight.data.to_shape((ic, oc * 4)).expect("contiguous");
        let mut out = Array4::<F>::zeros((n, oc, 2 * h, 2 * w));
        for i in 0..n {
            let x_flat = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((ic, h * w))
                .expect("contiguous");
            let cols = w2.t().dot(&x_flat); // (oc*4, h*w)
            let mut oi = out.index_axis_mut(Axis(0), i);
            let os = oi.as_slice_mut().expect("contiguous");
            let cs = cols.as_slice().expect("contiguous");
            for co in 0..oc {
                let b = self.bias.data[[co]];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = (co * 2 + dy) * 2 + dx;
                        for iy in 0..h {
                            let out_base = (co * 2 * h + 2 * iy + dy) * 2 * w + dx;
                            let col_base = row * h * w + iy * w;
                            for ix in 0..w {
                                os[out_base + 2 * ix] = cs[col_base + ix] + b;
                            }
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("forward(train) before backward");
        let (n, ic, h, w) = x.dim();
        let oc = self.out_channels;
        let w2 = self
            .weight
            .data
            .to_shape((ic, oc * 4))
            .expect("contiguous")
            .into_owned();
        let mut gx = Array4::<F>::zeros((n, ic, h, w));
        for i in 0..n {
            let mut g_cols = Array2::<F>::zeros((oc * 4, h * w));
            {
                let gs = g_cols.as_slice_mut().expect("contiguous");
                let gyi = gy.index_axis(Axis(0), i);
                let gys = gyi.to_slice().expect("contiguous");
                for co in 0..oc {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let row = (co * 2 + dy) * 2 + dx;
                            for iy in 0..h {
                                let gy_base = (co * 2 * h + 2 * iy + dy) * 2 * w + dx;
                                let col_base = row * h * w + iy * w;
                                for ix in 0..w {
                                    gs[col_base + ix] = gys[gy_base + 2 * ix];
                                }
                            }
                        }
                    }
                }
            }
            let x_flat = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((ic, h * w))
                .expect("contiguous");
            let gw = x_flat.dot(&g_cols.t()); // (ic, oc*4)
            {
                let mut gw2 = self
                    .weight
                    .grad
                    .view_mut()
                    .into_shape_with_order((ic, oc * 4))
                    .expect("contiguous");
                gw2 += &gw;
            }
            let gx_flat = w2.dot(&g_cols); // (ic, h*w)
            gx.index_axis_mut(Axis(0), i)
                .into_shape_with_order((ic, h * w))
                .expect("contiguous")
                .assign(&gx_flat);
        }
        for co in 0..oc {
            let sum: F = gy.index_axis(Axis(1), co).iter().copied().sum();
            self.bias.grad[[co]] += sum;
        }
        gx
    }
}

impl<F: Scalar> VisitTensors<F> for ConvTranspose2d<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        f(
            &scope(prefix, "weight"),
            TensorSlot::Param(&mut self.weight),
        );
        f(&scope(prefix, "bias"), TensorSlot::Param(&mut self.bias));
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Train mode normalizes with biased batch statistics and updates the
/// running buffers; eval mode normalizes with the running buffers.
#[derive(Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: PTensor<F>,
    pub beta: PTensor<F>,
    pub running_mean: ndarray::ArrayD<F>,
    pub running_var: ndarray::ArrayD<F>,
    channels: usize,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<F>>,
    accum: Option<BnAccum>,
}

#[derive(Clone)]
struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Vec<F>,
}

/// Exact per-channel statistics accumulated across calibration batches.
#[derive(Clone)]
struct BnAccum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: PTensor::new(Array1::<F>::ones(channels).into_dyn()),
            beta: PTensor::new(Array1::<F>::zeros(channels).into_dyn()),
            running_mean: Array1::<F>::zeros(channels).into_dyn(),
            running_var: Array1::<F>::ones(channels).into_dyn(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
            accum: None,
        }
    }

    /// Begin collecting exact statistics; train-mode forwards accumulate
    /// instead of updating the running buffers.
    pub fn start_stat_accumulation(&mut self) {
        self.accum = Some(BnAccum {
            sum: vec![0.0; self.channels],
            sum_sq: vec![0.0; self.channels],
            count: 0.0,
        });
    }

    /// Replace the running buffers with the accumulated full-data statistics.
    pub fn finish_stat_accumulation(&mut self) {
        if let Some(acc) = self.accum.take() {
            if acc.count > 0.0 {
                for ch in 0..self.channels {
                    let mean = acc.sum[ch] / acc.count;
                    let var = (acc.sum_sq[ch] / acc.count - mean * mean).max(0.0);
                    self.running_mean[[ch]] = F::from(mean).unwrap();
                    self.running_var[[ch]] = F::from(var).unwrap();
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let m = n * h * w;
        let eps = F::from(self.eps).unwrap();
        let mut out = Array4::<F>::zeros((n, c, h, w));
        if train && m > 0 {
            let mut xhat = Array4::<F>::zeros((n, c, h, w));
            let mut inv_stds = Vec::with_capacity(c);
            let mf = F::from(m as f64).unwrap();
            let mom = F::from(self.momentum).unwrap();
            if let Some(acc) = &mut self.accum {
                acc.count += m as f64;
            }
            for ch in 0..c {
                let xc = x.index_axis(Axis(1), ch);
                let mean = xc.iter().copied().sum::<F>() / mf;
                let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
                if let Some(acc) = &mut self.accum {
                    let mean_f = mean.to_f64().unwrap();
                    let var_f = var.to_f64().unwrap();
                    acc.sum[ch] += mean_f * m as f64;
                    acc.sum_sq[ch] += (var_f + mean_f * mean_f) * m as f64;
                } else {
                    self.running_mean[[ch]] =
                        (F::one() - mom) * self.running_mean[[ch]] + mom * mean;
                    self.running_var[[ch]] = (F::one() - mom) * self.running_var[[ch]] + mom * var;
                }
                let inv_std = F::one() / (var + eps).sqrt();
                inv_stds.push(inv_std);
                let g = self.gamma.data[[ch]];
                let b = self.beta.data[[ch]];
                let mut xh = xhat.index_axis_mut(Axis(1), ch);
                let mut oc = out.index_axis_mut(Axis(1), ch);
                ndarray::Zip::from(&mut xh)
                    .and(&mut oc)
                    .and(&xc)
                    .for_each(|xh_v, o_v, &x_v| {
                        let norm = (x_v - mean) * inv_std;
                        *xh_v = norm;
                        *o_v = g * norm + b;
                    });
            }
            self.cache = Some(BnCache {
                xhat,
                inv_std: inv_stds,
            });
        } else {
            for ch in 0..c {
                let mean = self.running_mean[[ch]];
                let inv_std = F::one() / (self.running_var[[ch]] + eps).sqrt();
                let g = self.gamma.data[[ch]];
                let b = self.beta.data[[ch]];
                let xc = x.index_axis(Axis(1), ch);
                let mut oc = out.index_axis_mut(Axis(1), ch);
                ndarray::Zip::from(&mut oc)
                    .and(&xc)
                    .for_each(|o_v, &x_v| *o_v = g * (x_v - mean) * inv_std + b);
            }
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("forward(train) before backward");
        let (n, c, h, w) = gy.dim();
        let m = F::from((n * h * w) as f64).unwrap();
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for ch in 0..c {
            let gyc = gy.index_axis(Axis(1), ch);
            let xhc = cache.xhat.index_axis(Axis(1), ch);
            let sum_gy: F = gyc.iter().copied().sum();
            let sum_gy_xhat: F = gyc.iter().zip(xhc.iter()).map(|(&g, &x)| g * x).sum();
            self.beta.grad[[ch]] += sum_gy;
            self.gamma.grad[[ch]] += sum_gy_xhat;
            let scale = self.gamma.data[[ch]] * cache.inv_std[ch] / m;
            let mut gxc = gx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut gxc)
                .and(&gyc)
                .and(&xhc)
                .for_each(|gx_v, &gy_v, &xh_v| {
                    *gx_v = scale * (m * gy_v - sum_gy - xh_v * sum_gy_xhat);
                });
        }
        gx
    }
}

impl<F: Scalar> VisitTensors<F> for BatchNorm2d<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        f(&scope(prefix, "gamma"), TensorSlot::Param(&mut self.gamma));
        f(&scope(prefix, "beta"), TensorSlot::Param(&mut self.beta));
        f(
            &scope(prefix, "running_mean"),
            TensorSlot::Buffer(&mut self.running_mean),
        );
        f(
            &scope(prefix, "running_var"),
            TensorSlot::Buffer(&mut self.running_var),
        );
    }
}

/// Elementwise max(0, x).
#[derive(Clone, Default)]
pub struct Relu<F> {
    cache: Option<Array4<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let y = self.cache.take().expect("forward(train) before backward");
        let mut gx = gy.clone();
        gx.zip_mut_with(&y, |g, &v| {
            if v <= F::zero() {
                *g = F::zero();
            }
        });
        gx
    }
}

/// 2x2 max pooling, stride 2. Input sides must be even.
#[derive(Clone, Default)]
pub struct MaxPool2<F> {
    cache: Option<(Array4<u8>, std::marker::PhantomData<F>)>,
}

impl<F: Scalar> MaxPool2<F> {
    pub fn new() -> Self {
        MaxPool2 { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even sides");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((n, c, oh, ow));
        let mut choice = Array4::<u8>::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[(i, ch, 2 * oy, 2 * ox)];
                        let mut idx = 0u8;
                        for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = x[(i, ch, 2 * oy + dy, 2 * ox + dx)];
                            if v > best {
                                best = v;
                                idx = (k + 1) as u8;
                            }
                        }
                        out[(i, ch, oy, ox)] = best;
                        choice[(i, ch, oy, ox)] = idx;
                    }
                }
            }
        }
        if train {
            self.cache = Some((choice, std::marker::PhantomData));
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let (choice, _) = self.cache.take().expect("forward(train) before backward");
        let (n, c, oh, ow) = gy.dim();
        let mut gx = Array4::<F>::zeros((n, c, 2 * oh, 2 * ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (dy, dx) = match choice[(i, ch, oy, ox)] {
                            0 => (0, 0),
                            1 => (0, 1),
                            2 => (1, 0),
                            _ => (1, 1),
                        };
                        gx[(i, ch, 2 * oy + dy, 2 * ox + dx)] = gy[(i, ch, oy, ox)];
                    }
                }
            }
        }
        gx
    }
}

/// 2x2 average pooling, stride 2.
#[derive(Clone, Default)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg pool needs even sides");
        let quarter = F::from(0.25).unwrap();
        Array4::from_shape_fn((n, c, h / 2, w / 2), |(i, ch, oy, ox)| {
            (x[(i, ch, 2 * oy, 2 * ox)]
                + x[(i, ch, 2 * oy, 2 * ox + 1)]
                + x[(i, ch, 2 * oy + 1, 2 * ox)]
                + x[(i, ch, 2 * oy + 1, 2 * ox + 1)])
                * quarter
        })
    }

    pub fn backward<F: Scalar>(&self, gy: &Array4<F>) -> Array4<F> {
        let (n, c, oh, ow) = gy.dim();
        let quarter = F::from(0.25).unwrap();
        Array4::from_shape_fn((n, c, 2 * oh, 2 * ow), |(i, ch, y, x)| {
            gy[(i, ch, y / 2, x / 2)] * quarter
        })
    }
}

/// Global average pooling `(N, C, H, W) -> (N, C)`.
#[derive(Clone, Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { hw: None }
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>, train: bool) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let scale = F::from(1.0 / (h * w) as f64).unwrap();
        if train {
            self.hw = Some((h, w));
        }
        let mut out = Array2::<F>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[(i, ch)] = x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() * scale;
            }
        }
        out
    }

    pub fn backward<F: Scalar>(&mut self, gy: &Array2<F>) -> Array4<F> {
        let (h, w) = self.hw.take().expect("forward(train) before backward");
        let (n, c) = gy.dim();
        let scale = F::from(1.0 / (h * w) as f64).unwrap();
        Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| gy[(i, ch)] * scale)
    }
}

/// Fully connected layer `(N, in) -> (N, out)`.
#[derive(Clone)]
pub struct Linear<F> {
    pub weight: PTensor<F>,
    pub bias: PTensor<F>,
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut draw = he_normal::<F>(rng, in_features);
        let weight = PTensor::new(
            Array2::from_shape_simple_fn((out_features, in_features), &mut draw).into_dyn(),
        );
        drop(draw);
        Linear {
            weight,
            bias: PTensor::new(Array1::<F>::zeros(out_features).into_dyn()),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Array2<F> {
        let (out_f, in_f) = (self.weight.data.shape()[0], self.weight.data.shape()[1]);
        let w2 = self
            .weight
            .data
            .to_shape((out_f, in_f))
            .expect("contiguous");
        let mut y = x.dot(&w2.t());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.bias.data[[j]];
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("forward(train) before backward");
        let (out_f, in_f) = (self.weight.data.shape()[0], self.weight.data.shape()[1]);
        let gw = gy.t().dot(&x);
        {
            let mut gw2 = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((out_f, in_f))
                .expect("contiguous");
            gw2 += &gw;
        }
        for j in 0..out_f {
            let sum: F = gy.column(j).iter().copied().sum();
            self.bias.grad[[j]] += sum;
        }
        let w2 = self
            .weight
            .data
            .to_shape((out_f, in_f))
            .expect("contiguous");
        gy.dot(&w2)
    }
}

impl<F: Scalar> VisitTensors<F> for Linear<F> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>)) {
        f(
            &scope(prefix, "weight"),
            TensorSlot::Param(&mut self.weight),
        );
        f(&scope(prefix, "bias"), TensorSlot::Param(&mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    /// Central finite difference of the loss `sum(y^2)/2` wrt a few
    /// coordinates of each parameter and of the input, compared against the
    /// layer's analytic gradients.
    fn grad_check<L>(
        layer: L,
        x: Array4<f64>,
        forward: fn(&mut L, &Array4<f64>, bool) -> Array4<f64>,
        backward: fn(&mut L, &Array4<f64>) -> Array4<f64>,
        params: fn(&mut L) -> Vec<&mut PTensor<f64>>,
    ) {
        let cell = RefCell::new(layer);
        let loss_at = |x: &Array4<f64>| -> f64 {
            forward(&mut cell.borrow_mut(), x, false)
                .iter()
                .map(|v| v * v / 2.0)
                .sum()
        };
        // dL/dy = y for this loss.
        let y = forward(&mut cell.borrow_mut(), &x, true);
        let gx = backward(&mut cell.borrow_mut(), &y);
        let h = 1e-5;

        let probes: Vec<(usize, f64)> = {
            let mut layer = cell.borrow_mut();
            params(&mut layer)
                .into_iter()
                .enumerate()
                .flat_map(|(pi, p)| {
                    let len = p.data.len();
                    [0usize, len / 2, len - 1]
                        .into_iter()
                        .map(move |i| (pi * 1_000_000 + i, p.grad.as_slice().unwrap()[i]))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        for (key, analytic) in probes {
            let (pi, i) = (key / 1_000_000, key % 1_000_000);
            let orig = {
                let mut layer = cell.borrow_mut();
                let p = &mut params(&mut layer)[pi];
                let v = p.data.as_slice().unwrap()[i];
                p.data.as_slice_mut().unwrap()[i] = v + h;
                v
            };
            let lp = loss_at(&x);
            {
                let mut layer = cell.borrow_mut();
                params(&mut layer)[pi].data.as_slice_mut().unwrap()[i] = orig - h;
            }
            let lm = loss_at(&x);
            {
                let mut layer = cell.borrow_mut();
                params(&mut layer)[pi].data.as_slice_mut().unwrap()[i] = orig;
            }
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-4 * (1.0 + numeric.abs()),
                "param {pi} grad mismatch at {i}: analytic {analytic}, numeric {numeric}"
            );
        }

        let mut x_pert = x.clone();
        let len = x.len();
        for probe in [0usize, len / 3, len - 1] {
            let orig = x_pert.as_slice().unwrap()[probe];
            let analytic = gx.as_slice().unwrap()[probe];
            x_pert.as_slice_mut().unwrap()[probe] = orig + h;
            let lp = loss_at(&x_pert);
            x_pert.as_slice_mut().unwrap()[probe] = orig - h;
            let lm = loss_at(&x_pert);
            x_pert.as_slice_mut().unwrap()[probe] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-4 * (1.0 + numeric.abs()),
                "input grad mismatch at {probe}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng();
        let conv = Conv2d::<f64>::new(2, 3, 3, 1, 1, true, &mut r);
        let x = Array4::from_shape_simple_fn((2, 2, 6, 6), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        grad_check(
            conv,
            x,
            |c, x, train| c.forward(x, train),
            |c, gy| c.backward(gy),
            |c| {
                let mut v: Vec<&mut PTensor<f64>> = vec![&mut c.weight];
                if let Some(b) = c.bias.as_mut() {
                    v.push(b);
                }
                v
            },
        );
    }

    #[test]
    fn conv2d_strided_gradients() {
        let mut r = rng();
        let conv = Conv2d::<f64>::new(1, 2, 3, 2, 1, false, &mut r);
        let x = Array4::from_shape_simple_fn((1, 1, 8, 8), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        grad_check(
            conv,
            x,
            |c, x, train| c.forward(x, train),
            |c, gy| c.backward(gy),
            |c| vec![&mut c.weight],
        );
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut r = rng();
        let up = ConvTranspose2d::<f64>::new(3, 2, &mut r);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 4), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        grad_check(
            up,
            x,
            |c, x, train| c.forward(x, train),
            |c, gy| c.backward(gy),
            |c| vec![&mut c.weight, &mut c.bias],
        );
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let mut r = rng();
        let mut up = ConvTranspose2d::<f64>::new(2, 5, &mut r);
        let x = Array4::<f64>::ones((1, 2, 3, 7));
        assert_eq!(up.forward(&x, false).dim(), (1, 5, 6, 14));
    }

    #[test]
    fn batchnorm_gradients() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(3);
        // Non-trivial gamma/beta so the gradient flows through both.
        bn.gamma
            .data
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&[1.3, 0.7, 1.1]);
        bn.beta
            .data
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&[0.1, -0.2, 0.05]);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 4), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        // Finite differences must see the same batch statistics the backward
        // assumed, so the "eval" closure also runs in train mode (batch stats
        // are a pure function of the input here; running buffers are unused).
        grad_check(
            bn,
            x,
            |b, x, _| b.forward(x, true),
            |b, gy| b.backward(gy),
            |b| vec![&mut b.gamma, &mut b.beta],
        );
    }

    #[test]
    fn batchnorm_stat_accumulation_is_exact() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let a = Array4::from_shape_fn((2, 2, 2, 2), |(n, c, y, x)| {
            (n * 11 + c * 5 + y * 3 + x) as f64 / 7.0
        });
        let b = Array4::from_shape_fn((3, 2, 2, 2), |(n, c, y, x)| {
            (n * 3 + c * 13 + y + x * 2) as f64 / 5.0
        });
        bn.start_stat_accumulation();
        bn.forward(&a, true);
        bn.forward(&b, true);
        bn.finish_stat_accumulation();
        // Compare against direct statistics of the concatenation.
        let all = ndarray::concatenate![Axis(0), a, b];
        for ch in 0..2 {
            let xc = all.index_axis(Axis(1), ch);
            let m = xc.len() as f64;
            let mean = xc.sum() / m;
            let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert!((bn.running_mean[[ch]] - mean).abs() < 1e-12);
            assert!((bn.running_var[[ch]] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean.fill(2.0);
        bn.running_var.fill(4.0);
        let x = Array4::from_elem((1, 1, 2, 2), 4.0);
        let y = bn.forward(&x, false);
        // (4 - 2) / sqrt(4 + eps) ~= 1
        assert!((y[(0, 0, 0, 0)] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pool_layers_shapes_and_gradients() {
        let mut mp = MaxPool2::<f64>::new();
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 2.0, 3.0, 1.0, 0.0, 1.0, 2.0, 5.0])
            .unwrap();
        let y = mp.forward(&x, true);
        assert_eq!(y.dim(), (1, 1, 1, 2));
        assert_eq!(y[(0, 0, 0, 0)], 2.0);
        assert_eq!(y[(0, 0, 0, 1)], 5.0);
        let gy = Array4::from_elem((1, 1, 1, 2), 1.0);
        let gx = mp.backward(&gy);
        assert_eq!(gx[(0, 0, 0, 1)], 1.0); // argmax of first window
        assert_eq!(gx[(0, 0, 1, 3)], 1.0); // argmax of second window
        assert_eq!(gx.sum(), 2.0);

        let ap = AvgPool2;
        let y = ap.forward(&x);
        assert_eq!(y[(0, 0, 0, 0)], 1.0);
        let gx = ap.backward(&y);
        assert_eq!(gx.dim(), x.dim());
        assert_eq!(gx[(0, 0, 0, 0)], 0.25);

        let mut gap = GlobalAvgPool::new();
        let y = gap.forward(&x, true);
        assert_eq!(y.dim(), (1, 1));
        assert!((y[(0, 0)] - 15.0 / 8.0).abs() < 1e-12);
        let gx = gap.backward(&Array2::from_elem((1, 1), 8.0f64));
        assert!(gx.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut lin = Linear::<f64>::new(4, 3, &mut r);
        let x = Array2::from_shape_simple_fn((2, 4), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        let y = lin.forward(&x, true);
        let gx = lin.backward(&y.clone());
        let h = 1e-5;
        // Check one weight coordinate numerically.
        let orig = lin.weight.data.as_slice().unwrap()[5];
        let analytic = lin.weight.grad.as_slice().unwrap()[5];
        lin.weight.data.as_slice_mut().unwrap()[5] = orig + h;
        let lp: f64 = lin.forward(&x, false).iter().map(|v| v * v / 2.0).sum();
        lin.weight.data.as_slice_mut().unwrap()[5] = orig - h;
        let lm: f64 = lin.forward(&x, false).iter().map(|v| v * v / 2.0).sum();
        lin.weight.data.as_slice_mut().unwrap()[5] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-4 * (1.0 + numeric.abs()));
        assert_eq!(gx.dim(), (2, 4));
    }

    #[test]
    fn relu_masks_gradient() {
        let mut relu = Relu::<f64>::new();
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let y = relu.forward(&x, true);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.0, 4.0]);
        let gy = Array4::from_elem((1, 1, 1, 4), 1.0);
        let gx = relu.backward(&gy);
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_eval_chunking_matches_unchunked() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(3, 4, 3, 1, 1, true, &mut r);
        let x = Array4::from_shape_simple_fn((1, 3, 12, 12), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        let full = conv.forward(&x, true);
        conv.cache = None;
        let eval = conv.forward(&x, false);
        for (a, b) in full.iter().zip(eval.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
