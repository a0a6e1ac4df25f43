//! Forward math and adjoints shared by the tape ops.

use alloc::vec;
use alloc::vec::Vec;

/// Guard inside the Sobel magnitude sqrt; keeps the gradient defined on
/// perfectly flat windows while `sqrt(e*e) - e == 0` holds exactly in f64.
pub(crate) const SOBEL_EPS: f64 = 1e-12;

pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `d @ b^T` for the left matmul adjoint: d is m x n, b is k x n, out m x k.
pub(crate) fn matmul_nt(d: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += d[i * n + j] * b[kk * n + j];
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// `a^T @ d` for the right matmul adjoint: a is m x k, d is m x n, out k x n.
pub(crate) fn matmul_tn(a: &[f64], m: usize, k: usize, d: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[kk * n + j] += av * d[i * n + j];
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(input: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = libm::exp(row[c] - max);
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}

/// Softmax VJP from the cached output: d_in = out * (d - sum(d * out)) per row.
pub(crate) fn softmax_rows_vjp(out: &[f64], d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; rows * cols];
    for r in 0..rows {
        let base = r * cols;
        let mut dot = 0.0;
        for c in 0..cols {
            dot += d[base + c] * out[base + c];
        }
        for c in 0..cols {
            d_in[base + c] = out[base + c] * (d[base + c] - dot);
        }
    }
    d_in
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Corner-aligned source coordinate for bilinear sampling: endpoints map to
/// endpoints; a size-1 output samples the centre.
fn bilinear_src(out_i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n == 1 {
        (in_n - 1) as f64 * 0.5
    } else {
        out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

/// Visit every (output cell, input cell, weight) tap of the corner-aligned
/// bilinear map from (h, w) to (out_h, out_w). Weights per output are convex.
pub(crate) fn for_each_bilinear_tap(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mut visit: impl FnMut(usize, usize, f64),
) {
    for oy in 0..out_h {
        let sy = bilinear_src(oy, out_h, h);
        let i0 = (sy as usize).min(h - 1);
        let i1 = (i0 + 1).min(h - 1);
        let fy = sy - i0 as f64;
        for ox in 0..out_w {
            let sx = bilinear_src(ox, out_w, w);
            let j0 = (sx as usize).min(w - 1);
            let j1 = (j0 + 1).min(w - 1);
            let fx = sx - j0 as f64;
            let out_idx = oy * out_w + ox;
            visit(out_idx, i0 * w + j0, (1.0 - fy) * (1.0 - fx));
            if j1 != j0 {
                visit(out_idx, i0 * w + j1, (1.0 - fy) * fx);
            }
            if i1 != i0 {
                visit(out_idx, i1 * w + j0, fy * (1.0 - fx));
                if j1 != j0 {
                    visit(out_idx, i1 * w + j1, fy * fx);
                }
            }
        }
    }
}

pub(crate) fn upsample_bilinear(input: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for_each_bilinear_tap(h, w, oh, ow, |o, i, wt| out[o] += wt * input[i]);
    out
}

pub(crate) fn upsample_bilinear_vjp(d: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; h * w];
    for_each_bilinear_tap(h, w, oh, ow, |o, i, wt| d_in[i] += wt * d[o]);
    d_in
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses with replicate-padded borders.
///
/// Each response is assembled as (positive tap sum) - (negative tap sum) so
/// that a constant window cancels to exactly zero.
pub(crate) fn sobel_gx_gy(input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let at = |i: isize, j: isize| input[clamp_idx(i, h) * w + clamp_idx(j, w)];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let pos_x = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1);
            let neg_x = at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1);
            let pos_y = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1);
            let neg_y = at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1);
            let idx = i as usize * w + j as usize;
            gx[idx] = pos_x - neg_x;
            gy[idx] = pos_y - neg_y;
        }
    }
    (gx, gy)
}

/// Edge magnitude `sqrt(gx^2 + gy^2 + eps^2) - eps`; exactly zero on flat
/// windows, smooth everywhere.
pub(crate) fn sobel_magnitude(input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy) = sobel_gx_gy(input, h, w);
    gx.iter()
        .zip(&gy)
        .map(|(&x, &y)| libm::sqrt(x * x + y * y + SOBEL_EPS * SOBEL_EPS) - SOBEL_EPS)
        .collect()
}

/// Adjoint of `sobel_magnitude`: route d through the magnitude, then through
/// the two convolutions with replicate padding.
pub(crate) fn sobel_vjp(input: &[f64], h: usize, w: usize, d: &[f64]) -> Vec<f64> {
    let (gx, gy) = sobel_gx_gy(input, h, w);
    let mut d_gx = vec![0.0; h * w];
    let mut d_gy = vec![0.0; h * w];
    for idx in 0..h * w {
        let denom = libm::sqrt(gx[idx] * gx[idx] + gy[idx] * gy[idx] + SOBEL_EPS * SOBEL_EPS);
        d_gx[idx] = d[idx] * gx[idx] / denom;
        d_gy[idx] = d[idx] * gy[idx] / denom;
    }
    let mut d_in = vec![0.0; h * w];
    {
        let mut scatter = |i: isize, j: isize, wt: f64| {
            d_in[clamp_idx(i, h) * w + clamp_idx(j, w)] += wt;
        };
        for i in 0..h as isize {
            for j in 0..w as isize {
                let idx = i as usize * w + j as usize;
                let dx = d_gx[idx];
                if dx != 0.0 {
                    scatter(i - 1, j + 1, dx);
                    scatter(i, j + 1, 2.0 * dx);
                    scatter(i + 1, j + 1, dx);
                    scatter(i - 1, j - 1, -dx);
                    scatter(i, j - 1, -2.0 * dx);
                    scatter(i + 1, j - 1, -dx);
                }
                let dy = d_gy[idx];
                if dy != 0.0 {
                    scatter(i + 1, j - 1, dy);
                    scatter(i + 1, j, 2.0 * dy);
                    scatter(i + 1, j + 1, dy);
                    scatter(i - 1, j - 1, -dy);
                    scatter(i - 1, j, -2.0 * dy);
                    scatter(i - 1, j + 1, -dy);
                }
            }
        }
    }
    d_in
}
