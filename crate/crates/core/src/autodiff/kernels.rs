//! Forward and backward numeric kernels on flat row-major buffers.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::gemm::{gemm, Mat};
use crate::tensor::strides;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Patch matrix `[out_h*out_w, c_in*kh*kw]` for one batch element.
fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (oh, ow, q) = (d.out_h(), d.out_w(), d.patch());
    for i in 0..oh {
        for j in 0..ow {
            let row = &mut cols[(i * ow + j) * q..(i * ow + j + 1) * q];
            let mut c = 0;
            for ci in 0..d.c_in {
                let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for a in 0..d.kh {
                    let base = (i + a) * d.w + j;
                    row[c..c + d.kw].copy_from_slice(&plane[base..base + d.kw]);
                    c += d.kw;
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let (oh, ow, q) = (d.out_h(), d.out_w(), d.patch());
    for i in 0..oh {
        for j in 0..ow {
            let row = &cols[(i * ow + j) * q..(i * ow + j + 1) * q];
            let mut c = 0;
            for ci in 0..d.c_in {
                let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for a in 0..d.kh {
                    let base = (i + a) * d.w + j;
                    for (dst, src) in plane[base..base + d.kw].iter_mut().zip(&row[c..c + d.kw]) {
                        *dst += src;
                    }
                    c += d.kw;
                }
            }
        }
    }
}

/// Valid cross-correlation plus per-output-channel bias.
pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (p, q) = (d.positions(), d.patch());
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * p;
    let mut out = vec![0.0; d.batch * out_stride];
    let mut cols = vec![0.0; p * q];
    for b in 0..d.batch {
        im2col(&x[b * in_stride..(b + 1) * in_stride], d, &mut cols);
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        for (co, plane) in y.chunks_mut(p).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(Mat::new(kernel, d.c_out, q), Mat::t(&cols, q, p), y, 1.0);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads {
    let (p, q) = (d.positions(), d.patch());
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * p;
    let mut dkernel = vec![0.0; d.c_out * q];
    let mut dbias = vec![0.0; d.c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; p * q];
    let mut dcols = vec![0.0; p * q];
    for b in 0..d.batch {
        let g = &dy[b * out_stride..(b + 1) * out_stride];
        for (co, plane) in g.chunks(p).enumerate() {
            dbias[co] += plane.iter().sum::<f64>();
        }
        im2col(&x[b * in_stride..(b + 1) * in_stride], d, &mut cols);
        gemm(
            Mat::new(g, d.c_out, p),
            Mat::new(&cols, p, q),
            &mut dkernel,
            1.0,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::t(g, p, d.c_out),
                Mat::new(kernel, d.c_out, q),
                &mut dcols,
                0.0,
            );
            col2im_add(&dcols, d, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    ConvGrads { dx, dkernel, dbias }
}

/// Per-channel normalization over `[B, C, S]` (S = flattened spatial extent).
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch statistics per channel: (mean, biased variance).
pub fn channel_stats(x: &[f64], b: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            acc += x[(bi * c + ch) * s..(bi * c + ch + 1) * s]
                .iter()
                .sum::<f64>();
        }
        mean[ch] = acc / n;
        let mut sq = 0.0;
        for bi in 0..b {
            for v in &x[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / n;
    }
    (mean, var)
}

pub fn channel_affine(
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    dims: (usize, usize, usize),
) -> (Vec<f64>, NormCache) {
    let (b, c, s) = dims;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            for ((xh, yy), xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yy = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Backward of per-channel normalization. With `batch_stats` the mean and
/// variance are functions of the input; otherwise they are constants.
pub fn channel_affine_backward(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    dims: (usize, usize, usize),
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, s) = dims;
    let n = (b * s) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            for (g, xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            let k = gamma[ch] * cache.inv_std[ch];
            for ((out, g), xh) in dx[r.clone()]
                .iter_mut()
                .zip(&dy[r.clone()])
                .zip(&cache.xhat[r])
            {
                *out = if batch_stats {
                    k * (g - dbeta[ch] / n - xh * dgamma[ch] / n)
                } else {
                    k * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalization over the last axis of `rows × d`.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let is = cache.inv_std[r];
        let n = d as f64;
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - s1 / n - xh[j] * s2 / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y = x · w + b` with `x: rows × din`, `w: din × dout`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = x.len() / din;
    let mut y = vec![0.0; rows * dout];
    for row in y.chunks_mut(dout) {
        row.copy_from_slice(b);
    }
    gemm(Mat::new(x, rows, din), Mat::new(w, din, dout), &mut y, 1.0);
    y
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    din: usize,
    dout: usize,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / din;
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * din];
        gemm(Mat::new(dy, rows, dout), Mat::t(w, dout, din), &mut dx, 0.0);
        dx
    });
    let mut dw = vec![0.0; din * dout];
    gemm(Mat::t(x, din, rows), Mat::new(dy, rows, dout), &mut dw, 0.0);
    let mut db = vec![0.0; dout];
    for row in dy.chunks(dout) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(k).zip(y.chunks_mut(k)) {
        softmax_into(xr, yr);
    }
    y
}

fn softmax_into(x: &[f64], y: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy = (xx - m).exp();
        z += *yy;
    }
    for yy in y.iter_mut() {
        *yy /= z;
    }
}

pub fn softmax_rows_backward(y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..k {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GELU in its exact form `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Mean over windows of the last axis; `rows × len → rows × out_len`.
pub fn avg_pool_forward(x: &[f64], len: usize, k: usize, s: usize) -> Vec<f64> {
    let out_len = (len - k) / s + 1;
    let rows = x.len() / len;
    let mut y = vec![0.0; rows * out_len];
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for o in 0..out_len {
            y[r * out_len + o] = xr[o * s..o * s + k].iter().sum::<f64>() / k as f64;
        }
    }
    y
}

pub fn avg_pool_backward(dy: &[f64], len: usize, k: usize, s: usize) -> Vec<f64> {
    let out_len = (len - k) / s + 1;
    let rows = dy.len() / out_len;
    let mut dx = vec![0.0; rows * len];
    for r in 0..rows {
        for o in 0..out_len {
            let g = dy[r * out_len + o] / k as f64;
            for v in &mut dx[r * len + o * s..r * len + o * s + k] {
                *v += g;
            }
        }
    }
    dx
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(x[0]);
        return out;
    }
    // Innermost axis handled by a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for t in 0..inner {
            out.push(x[base + t * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Cyclic shift along `axis`: `y[.., (t + shift) mod n, ..] = x[.., t, ..]`.
pub fn roll(x: &[f64], shape: &[usize], axis: usize, shift: isize) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = vec![0.0; x.len()];
    if n == 0 {
        return y;
    }
    let sh = shift.rem_euclid(n as isize) as usize;
    for o in 0..outer {
        for t in 0..n {
            let dst = (t + sh) % n;
            let src_off = (o * n + t) * inner;
            let dst_off = (o * n + dst) * inner;
            y[dst_off..dst_off + inner].copy_from_slice(&x[src_off..src_off + inner]);
        }
    }
    y
}

/// Dimensions of windowed multi-head attention over `[B, L, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
    pub fn windows(&self) -> usize {
        self.len / self.window
    }
    /// Shape of the attention-probability tensor `[B, H, L/M, M, M]`.
    pub fn score_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.heads,
            self.windows(),
            self.window,
            self.window,
        ]
    }
}

/// Scaled dot-product attention inside non-overlapping windows, heads
/// concatenated along the feature axis. Returns (output, probabilities).
pub fn window_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: &AttnDims,
) -> (Vec<f64>, Vec<f64>) {
    let (m, dk, dm) = (d.window, d.head_dim(), d.d_model);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; d.batch * d.heads * d.windows() * m * m];
    let mut scores = vec![0.0; m];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for w in 0..d.windows() {
                let pbase = (((b * d.heads + h) * d.windows()) + w) * m * m;
                let row0 = b * d.len + w * m;
                for i in 0..m {
                    let qi = &q[(row0 + i) * dm + h * dk..(row0 + i) * dm + (h + 1) * dk];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &k[(row0 + j) * dm + h * dk..(row0 + j) * dm + (h + 1) * dk];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = &mut probs[pbase + i * m..pbase + (i + 1) * m];
                    softmax_into(&scores, p);
                    let o = &mut out[(row0 + i) * dm + h * dk..(row0 + i) * dm + (h + 1) * dk];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &v[(row0 + j) * dm + h * dk..(row0 + j) * dm + (h + 1) * dk];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pj * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

pub fn window_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dy: &[f64],
    d: &AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, dk, dm) = (d.window, d.head_dim(), d.d_model);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dkk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; m];
    let span = |row: usize, h: usize| row * dm + h * dk..row * dm + (h + 1) * dk;
    for b in 0..d.batch {
        for h in 0..d.heads {
            for w in 0..d.windows() {
                let pbase = (((b * d.heads + h) * d.windows()) + w) * m * m;
                let row0 = b * d.len + w * m;
                for i in 0..m {
                    let p = &probs[pbase + i * m..pbase + (i + 1) * m];
                    let gi = &dy[span(row0 + i, h)];
                    for j in 0..m {
                        let vj = &v[span(row0 + j, h)];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dv[span(row0 + j, h)];
                        for (acc, g) in dvj.iter_mut().zip(gi) {
                            *acc += p[j] * g;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = span(row0 + j, h);
                        let qr = span(row0 + i, h);
                        for e in 0..dk {
                            dq[qr.start + e] += ds * k[kr.start + e];
                            dkk[kr.start + e] += ds * q[qr.start + e];
                        }
                    }
                }
            }
        }
    }
    (dq, dkk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let y = permute(&x, &shape, &[2, 0, 1]);
        // y[c, a, b] = x[a, b, c]
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y[c * 6 + a * 3 + b], x[a * 12 + b * 4 + c]);
                }
            }
        }
        let back = permute(&y, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn roll_is_cyclic() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(roll(&x, &[4], 0, 1), vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(roll(&x, &[4], 0, -1), vec![2.0, 3.0, 4.0, 1.0]);
        assert_eq!(roll(&x, &[4], 0, 4), x.to_vec());
    }

    #[test]
    fn gelu_matches_gaussian_cdf() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 2.995_950_3).abs() < 1e-6);
        assert!((gelu(-3.0) + 0.004_049_7).abs() < 1e-6);
    }
}
