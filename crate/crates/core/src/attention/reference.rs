//! Plain-loop attention used as a test oracle.
//!
//! Everything here is written directly from the score definitions, one query
//! at a time, with its own sinusoid and matrix products. It is slow and only
//! meant for small inputs.

use alloc::vec;
use alloc::vec::Vec;

use super::{AttentionParams, AttentionVariant};
use crate::error::{config_err, dim_err, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

type Rows = Vec<Vec<f64>>;

fn sinusoid(p: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let freq = libm::exp(-libm::log(10000.0) * (c - c % 2) as f64 / d as f64);
            if c % 2 == 0 {
                libm::sin(p * freq)
            } else {
                libm::cos(p * freq)
            }
        })
        .collect()
}

fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; c];
    for (i, vi) in v.iter().enumerate().take(r) {
        for (j, o) in out.iter_mut().enumerate() {
            *o += vi * w.data()[i * c + j];
        }
    }
    out
}

fn project(x: &Rows, lin: &Linear) -> Rows {
    let w = lin.weight.value();
    x.iter()
        .map(|row| {
            let mut y = vec_mat(row, w);
            if let Some(b) = &lin.bias {
                for (yi, bi) in y.iter_mut().zip(b.value().data()) {
                    *yi += bi;
                }
            }
            y
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = libm::exp(*v - m);
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

fn position(p: &AttentionParams, offset: isize) -> Result<Vec<f64>> {
    let we = p.position.as_ref().ok_or_else(|| config_err("missing W^E"))?;
    Ok(vec_mat(&sinusoid(offset as f64, p.d), we.value()))
}

/// One head of relative attention.
///
/// `queries[i]` attends over `keys`; `pos(i, j)` returns the (already
/// head-sliced) position vector for the pair.
fn head_attention(
    queries: &[&[f64]],
    keys: &[&[f64]],
    values: &[&[f64]],
    pos: &dyn Fn(usize, usize) -> Vec<f64>,
    scale: f64,
) -> Rows {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut s: Vec<f64> = keys
                .iter()
                .enumerate()
                .map(|(j, k)| (dot(q, k) + dot(q, &pos(i, j))) * scale)
                .collect();
            softmax(&mut s);
            let mut o = vec![0.0; values[0].len()];
            for (w, v) in s.iter().zip(values) {
                for (oi, vi) in o.iter_mut().zip(v.iter()) {
                    *oi += w * vi;
                }
            }
            o
        })
        .collect()
}

fn slice_cols(rows: &[Vec<f64>], lo: usize, hi: usize) -> Vec<&[f64]> {
    rows.iter().map(|r| &r[lo..hi]).collect()
}

/// Reference forward for any variant; `x: [n, d]`.
pub fn attention(x: &Tensor, p: &AttentionParams, variant: AttentionVariant) -> Result<Tensor> {
    variant.validate()?;
    if x.rank() != 2 || x.shape()[1] != p.d || x.shape()[0] == 0 {
        return Err(dim_err("reference attention", x.shape(), &[p.d]));
    }
    let n = x.shape()[0];
    let rows: Rows = (0..n).map(|i| x.row(i).to_vec()).collect();
    let (h, dh) = (p.heads, p.head_dim());
    let q = project(&rows, &p.query);
    let k = project(&rows, &p.key);
    let v = project(&rows, &p.value);
    let mut out: Rows = vec![vec![0.0; p.d]; variant.output_len(n)];
    match variant {
        AttentionVariant::Regular | AttentionVariant::Strided(_) => {
            let s = match variant {
                AttentionVariant::Strided(s) => s,
                _ => 1,
            };
            let qi: Rows = (0..n).step_by(s).map(|i| q[i].clone()).collect();
            let table: Vec<Vec<f64>> = (-(n as isize) + 1..n as isize)
                .map(|o| position(p, o))
                .collect::<Result<_>>()?;
            for head in 0..h {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let pos = |i: usize, j: usize| {
                    let o = j as isize - (i * s) as isize;
                    table[(o + n as isize - 1) as usize][lo..hi].to_vec()
                };
                let o = head_attention(
                    &slice_cols(&qi, lo, hi),
                    &slice_cols(&k, lo, hi),
                    &slice_cols(&v, lo, hi),
                    &pos,
                    1.0 / libm::sqrt(dh as f64),
                );
                for (dst, src) in out.iter_mut().zip(o) {
                    dst[lo..hi].copy_from_slice(&src);
                }
            }
        }
        AttentionVariant::Grouped(g) => {
            let slots = n.div_ceil(g);
            let group = |m: &Rows| -> Rows {
                (0..slots)
                    .map(|r| {
                        (0..g)
                            .flat_map(|t| {
                                let i = r * g + t;
                                if i < n {
                                    m[i].clone()
                                } else {
                                    vec![0.0; p.d]
                                }
                            })
                            .collect()
                    })
                    .collect()
            };
            let (qg, kg, vg) = (group(&q), group(&k), group(&v));
            let dg = g * dh;
            let mut gout: Rows = vec![vec![0.0; g * p.d]; slots];
            for head in 0..h {
                let (lo, hi) = (head * dg, (head + 1) * dg);
                let pos = |i: usize, j: usize| {
                    let kk = j as isize - i as isize;
                    let e: Vec<f64> = (0..g)
                        .flat_map(|t| position(p, kk * g as isize + t as isize).unwrap())
                        .collect();
                    e[lo..hi].to_vec()
                };
                let o = head_attention(
                    &slice_cols(&qg, lo, hi),
                    &slice_cols(&kg, lo, hi),
                    &slice_cols(&vg, lo, hi),
                    &pos,
                    1.0 / libm::sqrt(dg as f64),
                );
                for (dst, src) in gout.iter_mut().zip(o) {
                    dst[lo..hi].copy_from_slice(&src);
                }
            }
            for (i, row) in out.iter_mut().enumerate() {
                let (r, t) = (i / g, i % g);
                row.copy_from_slice(&gout[r][t * p.d..(t + 1) * p.d]);
            }
        }
        AttentionVariant::Local(w) => {
            let w = w.min(n);
            for start in (0..n).step_by(w) {
                let end = (start + w).min(n);
                for head in 0..h {
                    let (lo, hi) = (head * dh, (head + 1) * dh);
                    let pos = |i: usize, j: usize| position(p, j as isize - i as isize).unwrap()[lo..hi].to_vec();
                    let (qb, kb, vb) = (
                        slice_cols(&q[start..end], lo, hi),
                        slice_cols(&k[start..end], lo, hi),
                        slice_cols(&v[start..end], lo, hi),
                    );
                    let o = head_attention(&qb, &kb, &vb, &pos, 1.0 / libm::sqrt(dh as f64));
                    for (dst, src) in out[start..end].iter_mut().zip(o) {
                        dst[lo..hi].copy_from_slice(&src);
                    }
                }
            }
        }
        AttentionVariant::Linear => {
            let c = 1.0 / libm::pow(dh as f64, 0.25);
            for head in 0..h {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qs: Rows = q
                    .iter()
                    .map(|r| {
                        let mut s: Vec<f64> = r[lo..hi].iter().map(|x| x * c).collect();
                        softmax(&mut s);
                        s
                    })
                    .collect();
                let mut ks = vec![vec![0.0; dh]; n];
                for col in 0..dh {
                    let mut s: Vec<f64> = (0..n).map(|i| k[i][lo + col] * c).collect();
                    softmax(&mut s);
                    for i in 0..n {
                        ks[i][col] = s[i];
                    }
                }
                let mut ctx = vec![vec![0.0; dh]; dh];
                for i in 0..n {
                    for a in 0..dh {
                        for b in 0..dh {
                            ctx[a][b] += ks[i][a] * v[i][lo + b];
                        }
                    }
                }
                for (i, row) in out.iter_mut().enumerate() {
                    for b in 0..dh {
                        row[lo + b] = (0..dh).map(|a| qs[i][a] * ctx[a][b]).sum();
                    }
                }
            }
        }
    }
    let y = project(&out, &p.output);
    Tensor::new(&[y.len(), p.d], y.concat())
}
