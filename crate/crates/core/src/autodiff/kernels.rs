//! Forward and backward kernels on raw slices. Shapes are validated by the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::gemm::{gemm, View};

pub(super) struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[n, c, h, wd], &[o, wc, kh, kw]) = (x, w) else {
            return None;
        };
        if wc != c || kh != kw || kh == 0 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            in_c: c,
            in_h: h,
            in_w: wd,
            out_c: o,
            k: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.out_c, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose tap `kj` lands inside the image, as a range.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        // ox * s + kj - p in [0, in_w)
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.in_w + p > kj { (self.in_w + p - kj).div_ceil(s).min(self.out_w) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Input row for output row `oy` and tap `ki`, if inside the image.
    #[inline]
    fn source_row(&self, ki: usize, oy: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        (iy < self.in_h).then_some(iy)
    }

    fn im2col(&self, img: &[f32], cols: &mut [f32]) {
        let (ohw, s) = (self.out_hw(), self.stride);
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let (lo, hi) = self.valid_cols(kj);
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for (oy, out) in dst.chunks_exact_mut(self.out_w).enumerate() {
                        let Some(iy) = self.source_row(ki, oy) else {
                            out.fill(0.0);
                            continue;
                        };
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        // lo * s + kj >= pad by construction of `valid_cols`
                        let start = iy * self.in_w + lo * s + kj - self.pad;
                        if lo == hi {
                        } else if s == 1 {
                            out[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                        } else {
                            for (o, v) in out[lo..hi].iter_mut().zip(plane[start..].iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], img: &mut [f32]) {
        let (ohw, s) = (self.out_hw(), self.stride);
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let (lo, hi) = self.valid_cols(kj);
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for (oy, inp) in src.chunks_exact(self.out_w).enumerate() {
                        let Some(iy) = self.source_row(ki, oy) else {
                            continue;
                        };
                        for ox in lo..hi {
                            plane[iy * self.in_w + ox * s + kj - self.pad] += inp[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut cols = vec![0.0; patch * ohw];
    let mut out = vec![0.0; g.n * g.out_c * ohw];
    for (img, dst) in x.chunks_exact(g.in_len()).zip(out.chunks_exact_mut(g.out_c * ohw)) {
        g.im2col(img, &mut cols);
        gemm(g.out_c, patch, ohw, View::rows(w, patch), View::rows(&cols, ohw), 0.0, dst);
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(ohw).zip(b) {
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward_weight(g: &ConvGeom, x: &[f32], dy: &[f32], dw: &mut [f32]) {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut cols = vec![0.0; patch * ohw];
    for (img, dy_n) in x.chunks_exact(g.in_len()).zip(dy.chunks_exact(g.out_c * ohw)) {
        g.im2col(img, &mut cols);
        gemm(g.out_c, ohw, patch, View::rows(dy_n, ohw), View::transposed(&cols, ohw), 1.0, dw);
    }
}

pub(super) fn conv2d_backward_input(g: &ConvGeom, w: &[f32], dy: &[f32], dx: &mut [f32]) {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut dcols = vec![0.0; patch * ohw];
    for (dx_n, dy_n) in dx.chunks_exact_mut(g.in_len()).zip(dy.chunks_exact(g.out_c * ohw)) {
        gemm(patch, g.out_c, ohw, View::transposed(w, patch), View::rows(dy_n, ohw), 0.0, &mut dcols);
        g.col2im_add(&dcols, dx_n);
    }
}

pub(super) fn linear_forward(rows: usize, inp: usize, outp: usize, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; rows * outp];
    gemm(rows, inp, outp, View::rows(x, inp), View::rows(w, outp), 0.0, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(outp) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    out
}

pub(super) fn linear_backward_weight(rows: usize, inp: usize, outp: usize, x: &[f32], dy: &[f32], dw: &mut [f32]) {
    gemm(inp, rows, outp, View::transposed(x, inp), View::rows(dy, outp), 1.0, dw);
}

pub(super) fn linear_backward_input(rows: usize, inp: usize, outp: usize, w: &[f32], dy: &[f32], dx: &mut [f32]) {
    gemm(rows, outp, inp, View::rows(dy, outp), View::transposed(w, outp), 1.0, dx);
}

pub(super) fn max_pool_forward(s: &[usize], size: usize, x: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(super) fn layer_norm_forward(d: usize, eps: f32, x: &[f32], gamma: &[f32], beta: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / libm::sqrt(var + eps as f64);
        for (((o, &v), &g), &b) in dst.iter_mut().zip(row).zip(gamma).zip(beta) {
            *o = (((v as f64 - mean) * rstd) as f32) * g + b;
        }
        means.push(mean as f32);
        rstds.push(rstd as f32);
    }
    (out, means, rstds)
}

pub(super) fn layer_norm_backward_gamma(d: usize, x: &[f32], mean: &[f32], rstd: &[f32], dy: &[f32], dg: &mut [f32]) {
    let mut acc = vec![0.0f64; d];
    for (((row, g), &m), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(mean).zip(rstd) {
        for ((a, &v), &gv) in acc.iter_mut().zip(row).zip(g) {
            *a += (gv * (v - m) * r) as f64;
        }
    }
    for (o, a) in dg.iter_mut().zip(acc) {
        *o += a as f32;
    }
}

pub(super) fn layer_norm_backward_input(d: usize, x: &[f32], mean: &[f32], rstd: &[f32], gamma: &[f32], dy: &[f32], dx: &mut [f32]) {
    let mut xhat = vec![0.0f32; d];
    let mut dxhat = vec![0.0f32; d];
    for ((((row, g), out), &m), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(mean).zip(rstd) {
        let mut m1 = 0.0f64;
        let mut m2 = 0.0f64;
        for i in 0..d {
            xhat[i] = (row[i] - m) * r;
            dxhat[i] = g[i] * gamma[i];
            m1 += dxhat[i] as f64;
            m2 += (dxhat[i] * xhat[i]) as f64;
        }
        let (m1, m2) = ((m1 / d as f64) as f32, (m2 / d as f64) as f32);
        for i in 0..d {
            out[i] += r * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
}

pub(super) fn softmax_rows(d: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        softmax_into(row, dst);
    }
    out
}

fn softmax_into(row: &[f32], dst: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for (o, &v) in dst.iter_mut().zip(row) {
        let e = libm::expf(v - max);
        *o = e;
        total += e as f64;
    }
    for o in dst.iter_mut() {
        *o = (*o as f64 / total) as f32;
    }
}

pub(super) fn softmax_backward(d: usize, y: &[f32], dy: &[f32], dx: &mut [f32]) {
    for ((yr, gr), out) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b) as f64).sum();
        let dot = dot as f32;
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}

/// Mean over rows of `-sum_k t_k * log_softmax(z)_k`.
pub(super) fn cross_entropy(k: usize, z: &[f32], t: &[f32]) -> f32 {
    let rows = z.len() / k;
    let mut total = 0.0f64;
    for (zr, tr) in z.chunks_exact(k).zip(t.chunks_exact(k)) {
        let max = zr.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + libm::log(zr.iter().map(|&v| libm::exp(v as f64 - max)).sum::<f64>());
        for (&zv, &tv) in zr.iter().zip(tr) {
            total -= tv as f64 * (zv as f64 - lse);
        }
    }
    (total / rows as f64) as f32
}

pub(super) struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn offset(&self, b: usize, h: usize) -> usize {
        b * self.tokens * self.dim + h * self.head_dim()
    }

    /// View of one head as a `tokens x head_dim` matrix.
    fn head<'a>(&self, data: &'a [f32], b: usize, h: usize) -> View<'a> {
        View {
            data: &data[self.offset(b, h)..],
            rs: self.dim,
            cs: 1,
        }
    }

    /// View of one head transposed (`head_dim x tokens`).
    fn head_t<'a>(&self, data: &'a [f32], b: usize, h: usize) -> View<'a> {
        View {
            data: &data[self.offset(b, h)..],
            rs: 1,
            cs: self.dim,
        }
    }

    fn scatter_add(&self, src: &[f32], dst: &mut [f32], b: usize, h: usize) {
        let (dh, off) = (self.head_dim(), self.offset(b, h));
        for (t, row) in src.chunks_exact(dh).enumerate() {
            let base = off + t * self.dim;
            for (d, &v) in dst[base..base + dh].iter_mut().zip(row) {
                *d += v;
            }
        }
    }
}

pub(super) fn attention_forward(a: &AttnDims, q: &[f32], k: &[f32], v: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (t, dh) = (a.tokens, a.head_dim());
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; a.batch * a.heads * t * t];
    let mut scores = vec![0.0; t * t];
    let mut tmp = vec![0.0; t * dh];
    for b in 0..a.batch {
        for h in 0..a.heads {
            gemm(t, dh, t, a.head(q, b, h), a.head_t(k, b, h), 0.0, &mut scores);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let p = &mut probs[(b * a.heads + h) * t * t..][..t * t];
            for (row, dst) in scores.chunks_exact(t).zip(p.chunks_exact_mut(t)) {
                softmax_into(row, dst);
            }
            gemm(t, t, dh, View::rows(p, t), a.head(v, b, h), 0.0, &mut tmp);
            a.scatter_add(&tmp, &mut out, b, h);
        }
    }
    (out, probs)
}

pub(super) fn attention_backward(a: &AttnDims, q: &[f32], k: &[f32], v: &[f32], probs: &[f32], dy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (t, dh) = (a.tokens, a.head_dim());
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t * t];
    let mut tmp = vec![0.0; t * dh];
    for b in 0..a.batch {
        for h in 0..a.heads {
            let p = &probs[(b * a.heads + h) * t * t..][..t * t];
            let dout = a.head(dy, b, h);
            // dV = P^T dO
            gemm(t, t, dh, View::transposed(p, t), dout, 0.0, &mut tmp);
            a.scatter_add(&tmp, &mut dv, b, h);
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
            gemm(t, dh, t, dout, a.head_t(v, b, h), 0.0, &mut dp);
            for (dp_row, p_row) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let dot: f64 = dp_row.iter().zip(p_row).map(|(&x, &y)| (x * y) as f64).sum();
                let dot = dot as f32;
                for (d, &pv) in dp_row.iter_mut().zip(p_row) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(t, t, dh, View::rows(&dp, t), a.head(k, b, h), 0.0, &mut tmp);
            a.scatter_add(&tmp, &mut dq, b, h);
            gemm(t, t, dh, View::transposed(&dp, t), a.head(q, b, h), 0.0, &mut tmp);
            a.scatter_add(&tmp, &mut dk, b, h);
        }
    }
    (dq, dk, dv)
}

/// Per batch item, transposes an `a x b` matrix into `b x a`.
pub(super) fn transpose_inner(n: usize, a: usize, b: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(a * b).zip(out.chunks_exact_mut(a * b)).take(n) {
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

pub(super) fn mean_tokens(n: usize, t: usize, d: usize, x: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d);
    for sample in x.chunks_exact(t * d) {
        for j in 0..d {
            let s: f64 = (0..t).map(|i| sample[i * d + j] as f64).sum();
            out.push((s / t as f64) as f32);
        }
    }
    out
}
