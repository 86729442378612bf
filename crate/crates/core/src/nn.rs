//! Minimal double-precision CNN building blocks with hand-written backward passes.
//!
//! Parameters of a network live in one flat [`ParamStore`]; layers only hold
//! ranges into it, so gradients, Adam state and checkpoints are flat vectors too.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `C×H×W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reserve `len` parameters drawn from `N(0, std)`.
    pub fn alloc_normal<R: Rng>(&mut self, len: usize, std: f64, rng: &mut R) -> Range<usize> {
        let start = self.values.len();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.values.extend((0..len).map(|_| normal.sample(rng)));
        start..start + len
    }

    pub fn alloc_const(&mut self, len: usize, value: f64) -> Range<usize> {
        let start = self.values.len();
        self.values.extend(std::iter::repeat_n(value, len));
        start..start + len
    }
}

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernel, zero padding and optional fused ReLU.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: (usize, usize, usize),
    cols: Vec<f64>,
    /// Post-activation output (kept only for ReLU layers).
    out: Option<Vec<f64>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        relu: bool,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = if relu { (2.0 / fan_in).sqrt() } else { 0.01 };
        let weight = store.alloc_normal(out_c * in_c * k * k, std, rng);
        let bias = store.alloc_const(out_c, bias_init);
        Self { in_c, out_c, k, stride, pad: k / 2, relu, weight, bias }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Feat, oh: usize, ow: usize) -> Vec<f64> {
        let p = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut cols = vec![0.0; kk * p];
        for ci in 0..self.in_c {
            let plane = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = in_shape;
        let p = oh * ow;
        let mut dx = vec![0.0; c * h * w];
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Feat) -> (Feat, ConvCache) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let cols = self.im2col(x, oh, ow);
        let mut out = vec![0.0; self.out_c * p];
        let bias = &params[self.bias.clone()];
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(self.out_c, kk, p, 1.0, &params[self.weight.clone()], kk, 1, &cols, p, 1, 1.0, &mut out, p);
        if self.relu {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let cache = ConvCache { in_shape: (x.c, x.h, x.w), cols, out: self.relu.then(|| out.clone()) };
        (Feat { c: self.out_c, h: oh, w: ow, data: out }, cache)
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the post-activation output).
    /// Parameter gradients are accumulated when `grads` is given; the input
    /// gradient is computed only when `need_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        grad_out: &[f64],
        grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (_, h, w) = cache.in_shape;
        let (oh, ow) = self.out_size(h, w);
        let p = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut g = grad_out.to_vec();
        if let Some(out) = &cache.out {
            for (gv, &ov) in g.iter_mut().zip(out) {
                if ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        if let Some(grads) = grads {
            let (dw, db) = {
                let (lo, hi) = grads.split_at_mut(self.bias.start);
                (&mut lo[self.weight.clone()], &mut hi[..self.out_c])
            };
            gemm(self.out_c, p, kk, 1.0, &g, p, 1, &cache.cols, 1, p, 1.0, dw, kk);
            for (o, chunk) in g.chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, self.out_c, p, 1.0, &params[self.weight.clone()], 1, kk, &g, p, 1, 0.0, &mut dcols, p);
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }
}

/// Fully connected layer over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub relu: bool,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    rows: usize,
    input: Vec<f64>,
    out: Option<Vec<f64>>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, inp: usize, out: usize, relu: bool, std: Option<f64>, rng: &mut R) -> Self {
        let std = std.unwrap_or_else(|| if relu { (2.0 / inp as f64).sqrt() } else { (1.0 / inp as f64).sqrt() });
        let weight = store.alloc_normal(out * inp, std, rng);
        let bias = store.alloc_const(out, 0.0);
        Self { inp, out, relu, weight, bias }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, LinearCache) {
        assert_eq!(x.len(), rows * self.inp, "linear input size");
        let mut y = vec![0.0; rows * self.out];
        let bias = &params[self.bias.clone()];
        for chunk in y.chunks_mut(self.out) {
            chunk.copy_from_slice(bias);
        }
        gemm(rows, self.inp, self.out, 1.0, x, self.inp, 1, &params[self.weight.clone()], 1, self.inp, 1.0, &mut y, self.out);
        if self.relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let cache = LinearCache { rows, input: x.to_vec(), out: self.relu.then(|| y.clone()) };
        (y, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &LinearCache,
        grad_out: &[f64],
        grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let rows = cache.rows;
        let mut g = grad_out.to_vec();
        if let Some(out) = &cache.out {
            for (gv, &ov) in g.iter_mut().zip(out) {
                if ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        if let Some(grads) = grads {
            let (lo, hi) = grads.split_at_mut(self.bias.start);
            let dw = &mut lo[self.weight.clone()];
            gemm(self.out, rows, self.inp, 1.0, &g, 1, self.out, &cache.input, self.inp, 1, 1.0, dw, self.inp);
            let db = &mut hi[..self.out];
            for chunk in g.chunks(self.out) {
                for (d, v) in db.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = vec![0.0; rows * self.inp];
        gemm(rows, self.out, self.inp, 1.0, &g, self.out, 1, &params[self.weight.clone()], self.inp, 1, 0.0, &mut dx, self.inp);
        Some(dx)
    }
}

/// Bilinear RoI pooling ("RoIAlign", aligned half-pixel convention) with a
/// fixed number of samples per bin. Box coordinates are not differentiated.
#[derive(Debug, Clone)]
pub struct RoiAlign {
    pub out_size: usize,
    pub samples: usize,
}

/// Bilinear taps of every output bin: `(feature offset, weight)` lists.
#[derive(Debug, Clone)]
pub struct RoiCache {
    in_shape: (usize, usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

impl RoiAlign {
    fn taps(&self, h: usize, w: usize, roi: [f64; 4], scale: f64) -> Vec<Vec<(usize, f64)>> {
        let s = self.out_size;
        let x0 = roi[0] * scale - 0.5;
        let y0 = roi[1] * scale - 0.5;
        let bw = (roi[2] - roi[0]) * scale / s as f64;
        let bh = (roi[3] - roi[1]) * scale / s as f64;
        let n = self.samples;
        let norm = 1.0 / (n * n) as f64;
        let mut all = Vec::with_capacity(s * s);
        for by in 0..s {
            for bx in 0..s {
                let mut taps = Vec::with_capacity(4 * n * n);
                for sy in 0..n {
                    let y = y0 + by as f64 * bh + (sy as f64 + 0.5) * bh / n as f64;
                    for sx in 0..n {
                        let x = x0 + bx as f64 * bw + (sx as f64 + 0.5) * bw / n as f64;
                        if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
                            continue;
                        }
                        let y = y.max(0.0);
                        let x = x.max(0.0);
                        let (ylo, yhi, ly) = if y as usize >= h - 1 {
                            (h - 1, h - 1, 0.0)
                        } else {
                            let lo = y as usize;
                            (lo, lo + 1, y - lo as f64)
                        };
                        let (xlo, xhi, lx) = if x as usize >= w - 1 {
                            (w - 1, w - 1, 0.0)
                        } else {
                            let lo = x as usize;
                            (lo, lo + 1, x - lo as f64)
                        };
                        let (hy, hx) = (1.0 - ly, 1.0 - lx);
                        taps.push((ylo * w + xlo, hy * hx * norm));
                        taps.push((ylo * w + xhi, hy * lx * norm));
                        taps.push((yhi * w + xlo, ly * hx * norm));
                        taps.push((yhi * w + xhi, ly * lx * norm));
                    }
                }
                all.push(taps);
            }
        }
        all
    }

    /// Pool one RoI (image coordinates `[x0, y0, x1, y1]`) from `feat` whose
    /// stride relative to the image is `1 / scale`. Output is `C×S×S`.
    pub fn forward(&self, feat: &Feat, roi: [f64; 4], scale: f64) -> (Feat, RoiCache) {
        let taps = self.taps(feat.h, feat.w, roi, scale);
        let s = self.out_size;
        let mut out = Feat::zeros(feat.c, s, s);
        let plane = feat.plane();
        for c in 0..feat.c {
            let src = &feat.data[c * plane..(c + 1) * plane];
            let dst = &mut out.data[c * s * s..(c + 1) * s * s];
            for (bin, t) in taps.iter().enumerate() {
                dst[bin] = t.iter().map(|&(i, wgt)| wgt * src[i]).sum();
            }
        }
        (out, RoiCache { in_shape: (feat.c, feat.h, feat.w), taps })
    }

    /// Accumulate the feature-map gradient of one pooled RoI into `grad_feat`.
    pub fn backward(&self, cache: &RoiCache, grad_out: &[f64], grad_feat: &mut [f64]) {
        let (c, h, w) = cache.in_shape;
        let s2 = self.out_size * self.out_size;
        for ci in 0..c {
            let dst = &mut grad_feat[ci * h * w..(ci + 1) * h * w];
            let src = &grad_out[ci * s2..(ci + 1) * s2];
            for (bin, t) in cache.taps.iter().enumerate() {
                let g = src[bin];
                if g != 0.0 {
                    for &(i, wgt) in t {
                        dst[i] += wgt * g;
                    }
                }
            }
        }
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.update_with_lr(params, grads, self.lr);
    }

    pub fn update_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary cross-entropy of logit `x` against target probability `t`.
#[inline]
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    -(t * log_sigmoid(x) + (1.0 - t) * log_sigmoid(-x))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}
