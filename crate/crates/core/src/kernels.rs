//! Slice-level numeric kernels shared by the forward and adjoint rules.

use libm::{exp, sqrt};

/// `out += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `ta`/`tb` select whether the stored operand is the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (r, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[r * n..(r + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for r in 0..k {
                let brow = &b[r * n..(r + 1) * n];
                let acol = &a[r * m..(r + 1) * m];
                for (i, &av) in acol.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for r in 0..k {
                        s += a[r * m + i] * b[j * k + r];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over strided slices of `x`.
pub fn softmax(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = exp(x[base + t * inner] - max);
                out[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                out[base + t * inner] /= sum;
            }
        }
    }
}

pub fn log_softmax(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                sum += exp(x[base + t * inner] - max);
            }
            let lse = max + libm::log(sum);
            for t in 0..len {
                out[base + t * inner] = x[base + t * inner] - lse;
            }
        }
    }
}

/// Per-row normalization statistics: returns (x_hat, inverse std per row).
pub fn layer_norm_stats(x: &[f64], rows: usize, d: usize, eps: f64) -> (alloc::vec::Vec<f64>, alloc::vec::Vec<f64>) {
    let mut xhat = alloc::vec![0.0; rows * d];
    let mut rstd = alloc::vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / sqrt(var + eps);
        rstd[r] = inv;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

/// Same-padding offset for an odd kernel.
pub fn same_pad(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Output length of a same-padded strided convolution: `ceil(n / stride)`.
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}
