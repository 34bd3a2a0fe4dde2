use alloc::format;

use super::skew::rel_to_abs_strided;
use super::{AttentionParams, AttentionVariant, RelPosTable};
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smallest `n_max` a positional table needs for `variant` at length `n`.
pub fn table_len_for(variant: AttentionVariant, n: usize) -> usize {
    match variant {
        AttentionVariant::Regular | AttentionVariant::Strided(_) => n,
        AttentionVariant::Grouped(g) => n.div_ceil(g.max(1)) * g.max(1),
        AttentionVariant::Local(w) => w.min(n),
        AttentionVariant::Linear => 1,
    }
    .max(1)
}

/// Dispatches to the kernel for `variant`; `table` is unused for linear attention.
pub fn mhsa(
    g: &Graph,
    x: &Var,
    p: &AttentionParams,
    table: Option<&RelPosTable>,
    variant: AttentionVariant,
) -> Result<Var> {
    variant.validate()?;
    if variant == AttentionVariant::Linear {
        return mhsa_linear(g, x, p);
    }
    let table = table.ok_or_else(|| config_err("relative attention needs a positional table"))?;
    match variant {
        AttentionVariant::Regular => mhsa_regular(g, x, p, table),
        AttentionVariant::Strided(s) => mhsa_strided(g, x, p, table, s),
        AttentionVariant::Grouped(gs) => mhsa_grouped(g, x, p, table, gs),
        AttentionVariant::Local(w) => mhsa_local(g, x, p, table, w),
        AttentionVariant::Linear => unreachable!(),
    }
}

fn check_input(x: &Var, p: &AttentionParams) -> Result<usize> {
    let s = x.shape();
    if s.len() != 2 || s[1] != p.d || s[0] == 0 {
        return Err(dim_err("mhsa", s, &[p.d]));
    }
    Ok(s[0])
}

fn check_table(table: &RelPosTable, p: &AttentionParams, needed: usize) -> Result<()> {
    if table.dim() != p.d {
        return Err(dim_err("mhsa table", &[table.dim()], &[p.d]));
    }
    if needed > table.n_max() {
        return Err(config_err(format!(
            "sequence needs positional range {needed} but table has n_max {}",
            table.n_max()
        )));
    }
    Ok(())
}

/// `[n, D] → [H, n, D/H]`.
fn split_heads(g: &Graph, x: &Var, heads: usize) -> Result<Var> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let x = g.reshape(x, &[n, heads, d / heads])?;
    g.permute(&x, &[1, 0, 2])
}

/// `[H, n, dh] → [n, H·dh]`.
fn merge_heads(g: &Graph, x: &Var) -> Result<Var> {
    let (h, n, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let x = g.permute(x, &[1, 0, 2])?;
    g.reshape(&x, &[n, h * dh])
}

/// `E = R[lo..=hi] · W^E`.
fn position_embedding(g: &Graph, p: &AttentionParams, table: &RelPosTable, lo: isize, hi: isize) -> Result<Var> {
    let we = p
        .position
        .as_ref()
        .ok_or_else(|| config_err("relative attention needs a position projection W^E"))?;
    let r = g.constant(table.offsets(lo, hi)?);
    g.matmul(&r, &g.param(we))
}

/// `softmax(scale · (q kᵀ + rel) + mask) v` batched over the leading axis.
fn attend(g: &Graph, q: &Var, k: &Var, v: &Var, rel: &Var, scale: f64, mask: Option<Tensor>) -> Result<Var> {
    let content = g.bmm(q, &g.transpose(k)?)?;
    let scores = g.scale(&g.add(&content, rel)?, scale);
    let scores = match mask {
        Some(m) => g.add(&scores, &g.constant(m))?,
        None => scores,
    };
    let weights = g.softmax(&scores, 2)?;
    g.bmm(&weights, v)
}

/// Full-context relative MHSA.
pub fn mhsa_regular(g: &Graph, x: &Var, p: &AttentionParams, table: &RelPosTable) -> Result<Var> {
    mhsa_strided(g, x, p, table, 1)
}

/// Queries at rows `0, s, 2s, …` attend over the full sequence; offsets are
/// measured in input frames.
pub fn mhsa_strided(g: &Graph, x: &Var, p: &AttentionParams, table: &RelPosTable, stride: usize) -> Result<Var> {
    let n = check_input(x, p)?;
    if stride == 0 {
        return Err(config_err("attention stride must be >= 1"));
    }
    check_table(table, p, n)?;
    let xq = if stride == 1 { x.clone() } else { g.subsample(x, 0, stride)? };
    let q = split_heads(g, &p.query.forward(g, &xq)?, p.heads)?;
    let k = split_heads(g, &p.key.forward(g, x)?, p.heads)?;
    let v = split_heads(g, &p.value.forward(g, x)?, p.heads)?;
    let last = n as isize - 1;
    let e = split_heads(g, &position_embedding(g, p, table, -last, last)?, p.heads)?;
    let rel = g.bmm(&q, &g.transpose(&e)?)?;
    let rel = rel_to_abs_strided(g, &rel, n, stride)?;
    let scale = 1.0 / libm::sqrt(p.head_dim() as f64);
    let o = attend(g, &q, &k, &v, &rel, scale, None)?;
    p.output.forward(g, &merge_heads(g, &o)?)
}

/// Attention over groups of `group` consecutive frames concatenated along the
/// feature axis.
///
/// The sequence is zero-padded (after projection) to a multiple of `group`;
/// padded query rows are dropped from the output. Group offset `k` covers
/// frame offsets `k·group .. k·group + group - 1`.
pub fn mhsa_grouped(g: &Graph, x: &Var, p: &AttentionParams, table: &RelPosTable, group: usize) -> Result<Var> {
    let n = check_input(x, p)?;
    if group == 0 {
        return Err(config_err("attention group size must be >= 1"));
    }
    let n_pad = n.div_ceil(group) * group;
    check_table(table, p, n_pad)?;
    let n_grp = n_pad / group;
    let d_grp = p.d * group;
    let grouped = |lin: &crate::nn::Linear| -> Result<Var> {
        let y = g.pad(&lin.forward(g, x)?, 0, 0, n_pad - n)?;
        split_heads(g, &g.reshape(&y, &[n_grp, d_grp])?, p.heads)
    };
    let q = grouped(&p.query)?;
    let k = grouped(&p.key)?;
    let v = grouped(&p.value)?;
    let e = position_embedding(g, p, table, -((n_pad - group) as isize), n_pad as isize - 1)?;
    let e = split_heads(g, &g.reshape(&e, &[2 * n_grp - 1, d_grp])?, p.heads)?;
    let rel = g.bmm(&q, &g.transpose(&e)?)?;
    let rel = rel_to_abs_strided(g, &rel, n_grp, 1)?;
    let scale = 1.0 / libm::sqrt((p.head_dim() * group) as f64);
    let o = attend(g, &q, &k, &v, &rel, scale, None)?;
    let o = g.reshape(&merge_heads(g, &o)?, &[n_pad, p.d])?;
    let o = if n_pad == n { o } else { g.slice(&o, 0, 0, n)? };
    p.output.forward(g, &o)
}

/// Relative MHSA run independently inside non-overlapping blocks of `window`
/// frames. Padded key positions of the last block are masked.
pub fn mhsa_local(g: &Graph, x: &Var, p: &AttentionParams, table: &RelPosTable, window: usize) -> Result<Var> {
    let n = check_input(x, p)?;
    if window == 0 {
        return Err(config_err("attention window must be >= 1"));
    }
    let w = window.min(n);
    check_table(table, p, w)?;
    let blocks = n.div_ceil(w);
    let n_pad = blocks * w;
    let (h, dh) = (p.heads, p.head_dim());
    let blocked = |lin: &crate::nn::Linear| -> Result<Var> {
        let y = g.pad(&lin.forward(g, x)?, 0, 0, n_pad - n)?;
        let y = g.reshape(&y, &[blocks, w, h, dh])?;
        g.permute(&y, &[2, 0, 1, 3])
    };
    let q = blocked(&p.query)?;
    let k = g.reshape(&blocked(&p.key)?, &[h * blocks, w, dh])?;
    let v = g.reshape(&blocked(&p.value)?, &[h * blocks, w, dh])?;
    let e = split_heads(g, &position_embedding(g, p, table, -(w as isize - 1), w as isize - 1)?, h)?;
    let rel = g.bmm(&g.reshape(&q, &[h, blocks * w, dh])?, &g.transpose(&e)?)?;
    let rel = g.reshape(&rel, &[h * blocks, w, 2 * w - 1])?;
    let rel = rel_to_abs_strided(g, &rel, w, 1)?;
    let q = g.reshape(&q, &[h * blocks, w, dh])?;
    let mask = (n_pad > n).then(|| {
        let valid = n - (blocks - 1) * w;
        Tensor::from_fn(&[h * blocks, w, w], |i| {
            let (hb, j) = (i / (w * w), i % w);
            if hb % blocks == blocks - 1 && j >= valid {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
    });
    let scale = 1.0 / libm::sqrt(dh as f64);
    let o = attend(g, &q, &k, &v, &rel, scale, mask)?;
    let o = g.reshape(&o, &[h, blocks, w, dh])?;
    let o = g.permute(&o, &[1, 2, 0, 3])?;
    let o = g.reshape(&o, &[n_pad, p.d])?;
    let o = if n_pad == n { o } else { g.slice(&o, 0, 0, n)? };
    p.output.forward(g, &o)
}

/// `σ_row(Q_h/d_h^¼) · (σ_col(K_h/d_h^¼)ᵀ V_h)` per head; no position term.
pub fn mhsa_linear(g: &Graph, x: &Var, p: &AttentionParams) -> Result<Var> {
    check_input(x, p)?;
    let c = 1.0 / libm::pow(p.head_dim() as f64, 0.25);
    let q = split_heads(g, &p.query.forward(g, x)?, p.heads)?;
    let k = split_heads(g, &p.key.forward(g, x)?, p.heads)?;
    let v = split_heads(g, &p.value.forward(g, x)?, p.heads)?;
    let q = g.softmax(&g.scale(&q, c), 2)?;
    let k = g.softmax(&g.scale(&k, c), 1)?;
    let context = g.bmm(&g.transpose(&k)?, &v)?;
    let o = g.bmm(&q, &context)?;
    p.output.forward(g, &merge_heads(g, &o)?)
}
