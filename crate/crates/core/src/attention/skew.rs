//! Relative-to-absolute logit re-indexing by pad/reshape/slice.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};

/// `[B, n, 2n-1] → [B, n, n]` with `out[b,i,j] = x[b, i, j-i+n-1]`.
pub fn rel_to_abs(g: &Graph, x: &Var) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(dim_err("rel_to_abs", s, &[]));
    }
    rel_to_abs_strided(g, x, s[1], 1)
}

/// Strided generalization for queries at positions `0, s, 2s, …`:
/// `[B, n_q, 2n_k-1] → [B, n_q, n_k]` with `out[b,i,j] = x[b, i, j - i·s + n_k - 1]`.
///
/// Each padded row is `s` entries wider than the reshaped row, so row `i`
/// shifts left by `i·s`. With `s = 1` this is the usual one-column skew.
pub fn rel_to_abs_strided(g: &Graph, x: &Var, n_k: usize, stride: usize) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 || n_k == 0 || stride == 0 || s[2] != 2 * n_k - 1 {
        return Err(dim_err("rel_to_abs", s, &[n_k, 2 * n_k.max(1) - 1]));
    }
    let (b, n_q, width) = (s[0], s[1], s[2]);
    if n_q == 0 || (n_q - 1) * stride > n_k - 1 {
        return Err(dim_err("rel_to_abs", s, &[n_k, stride]));
    }
    let padded = g.pad(x, 2, 0, stride)?;
    let flat = g.reshape(&padded, &[b, n_q * (width + stride)])?;
    let rows = n_q + (n_q * stride).div_ceil(width);
    let flat = g.pad(&flat, 1, 0, rows * width - n_q * (width + stride))?;
    let grid = g.reshape(&flat, &[b, rows, width])?;
    let grid = g.slice(&grid, 1, 0, n_q)?;
    g.slice(&grid, 2, n_k - 1, width)
}
