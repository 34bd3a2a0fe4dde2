//! Analytic multiply-add, parameter and activation-memory accounting.
//!
//! Counting rules: a matrix product `[m×k]·[k×p]` costs `m·k·p`; a
//! convolution costs `outputs · taps · in_channels` (one input channel per
//! output for depthwise); norms, activations, softmax and pooling are free.
//! The counts mirror the executed graph exactly, so they can be checked
//! against [`Graph::madds`](crate::Graph::madds).
//!
//! Category split: `att_scores` holds the content score `Q Kᵀ` and the
//! context product `A V` (or both linear-attention products); `att_proj`
//! holds the Q/K/V/O projections and the relative-position terms `R W^E`
//! and `Q Eᵀ`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::AttentionVariant;
use crate::blocks::BlockConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionCost {
    pub scores: u64,
    pub projections: u64,
}

/// Cost of one attention layer on `n` frames of width `d`.
pub fn attention_madds(variant: AttentionVariant, n: usize, d: usize, heads: usize) -> AttentionCost {
    let (n, d, h) = (n as u64, d as u64, heads as u64);
    let dh = d / h;
    let proj = |n_q: u64, n_kv: u64, e_rows: u64| n_q * d * d * 2 + n_kv * d * d * 2 + e_rows * d * d;
    match variant {
        AttentionVariant::Regular | AttentionVariant::Strided(_) => {
            let s = match variant {
                AttentionVariant::Strided(s) => s as u64,
                _ => 1,
            };
            let nq = n.div_ceil(s);
            AttentionCost {
                scores: 2 * h * nq * n * dh,
                projections: proj(nq, n, 2 * n - 1) + h * nq * (2 * n - 1) * dh,
            }
        }
        AttentionVariant::Grouped(g) => {
            let g = g as u64;
            let ng = n.div_ceil(g);
            let dg = dh * g;
            AttentionCost {
                scores: 2 * h * ng * ng * dg,
                projections: proj(n, n, 2 * ng * g - g) + h * ng * (2 * ng - 1) * dg,
            }
        }
        AttentionVariant::Local(w) => {
            let w = (w as u64).min(n);
            let padded = n.div_ceil(w) * w;
            AttentionCost {
                scores: 2 * h * padded * w * dh,
                projections: proj(n, n, 2 * w - 1) + h * padded * (2 * w - 1) * dh,
            }
        }
        AttentionVariant::Linear => AttentionCost {
            scores: 2 * h * n * dh * dh,
            projections: proj(n, n, 0),
        },
    }
}

/// Elements of the attention weight maps of one layer.
pub fn score_map_elems(variant: AttentionVariant, n: usize, heads: usize) -> u64 {
    let (n, h) = (n as u64, heads as u64);
    match variant {
        AttentionVariant::Regular => h * n * n,
        AttentionVariant::Strided(s) => h * n.div_ceil(s as u64) * n,
        AttentionVariant::Grouped(g) => {
            let ng = n.div_ceil(g as u64);
            h * ng * ng
        }
        AttentionVariant::Local(w) => {
            let w = (w as u64).min(n);
            h * n.div_ceil(w) * w * w
        }
        // The d_h × d_h context per head.
        AttentionVariant::Linear => 0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct BlockCost {
    ffn: u64,
    att_scores: u64,
    att_proj: u64,
    conv: u64,
}

impl BlockCost {
    fn total(&self) -> u64 {
        self.ffn + self.att_scores + self.att_proj + self.conv
    }
}

fn block_madds(b: &BlockConfig, n: usize) -> BlockCost {
    let e = b.ffn_expansion as u64;
    let (d_in, d_out, k) = (b.d_in as u64, b.d_out as u64, b.conv_kernel as u64);
    let att = attention_madds(b.attention_variant(), n, b.d_in, b.heads);
    let n_conv = b.attention_variant().output_len(n) as u64;
    let n_out = b.output_len(n) as u64;
    let mut conv = n_conv * d_in * 2 * d_out + n_out * k * d_out + n_out * d_out * d_out;
    if d_in != d_out {
        conv += n_out * d_in * d_out;
    }
    BlockCost {
        ffn: 2 * n as u64 * d_in * e * d_in + 2 * n_out * d_out * e * d_out,
        att_scores: att.scores,
        att_proj: att.projections,
        conv,
    }
}

/// Per-category multiply-adds of one encoder on one input.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MAddsReport {
    pub config: String,
    pub frames: usize,
    pub total: u64,
    pub ffn: u64,
    pub att_scores: u64,
    pub att_proj: u64,
    pub conv: u64,
    pub stem: u64,
    pub head: u64,
    pub params: u64,
    /// Block multiply-adds per stage (stem and head excluded).
    pub per_stage: Vec<u64>,
}

fn stem_madds(c: &EncoderConfig, t: usize) -> u64 {
    let ch = c.stem_channels as u64;
    let (mut n, mut f, mut ci) = (t as u64, c.input_features as u64, 1u64);
    let mut total = 0;
    for _ in 0..c.stem_layers() {
        n = n.div_ceil(2);
        f = f.div_ceil(2);
        total += n * f * ch * 9 * ci;
        ci = ch;
    }
    total + n * f * ch * c.stages[0].dim as u64
}

/// Multiply-adds of `config` on `frames` input frames.
pub fn count_madds(config: &EncoderConfig, name: &str, frames: usize) -> Result<MAddsReport> {
    config.validate()?;
    let stem = stem_madds(config, frames);
    let mut per_stage = vec![0u64; config.stages.len()];
    let mut sum = BlockCost::default();
    let mut n = config.stem_len(frames);
    for (si, b) in config.block_plan() {
        let c = block_madds(&b, n);
        per_stage[si] += c.total();
        sum.ffn += c.ffn;
        sum.att_scores += c.att_scores;
        sum.att_proj += c.att_proj;
        sum.conv += c.conv;
        n = b.output_len(n);
    }
    let head = config
        .output_vocab
        .map_or(0, |v| (n * config.output_dim() * v) as u64);
    Ok(MAddsReport {
        config: name.into(),
        frames,
        total: sum.total() + stem + head,
        ffn: sum.ffn,
        att_scores: sum.att_scores,
        att_proj: sum.att_proj,
        conv: sum.conv,
        stem,
        head,
        params: count_params(config)?,
        per_stage,
    })
}

fn block_params(b: &BlockConfig) -> u64 {
    let e = b.ffn_expansion as u64;
    let (d_in, d_out, k) = (b.d_in as u64, b.d_out as u64, b.conv_kernel as u64);
    let ffn = |d: u64| 2 * d + (d * e * d + e * d) + (e * d * d + d);
    let pos = if b.attention_variant().uses_positions() { d_in * d_in } else { 0 };
    let mhsa = 2 * d_in + 4 * (d_in * d_in + d_in) + pos;
    let mut conv = 2 * d_in + (d_in * 2 * d_out + 2 * d_out) + (k * d_out + d_out) + 2 * d_out + (d_out * d_out + d_out);
    if d_in != d_out {
        conv += d_in * d_out + d_out;
    }
    ffn(d_in) + mhsa + conv + ffn(d_out) + 2 * d_out
}

/// Exact weight and bias count of the model `config` builds.
pub fn count_params(config: &EncoderConfig) -> Result<u64> {
    config.validate()?;
    let ch = config.stem_channels as u64;
    let mut stem = 0;
    let mut ci = 1;
    for _ in 0..config.stem_layers() {
        stem += 9 * ci * ch + ch;
        ci = ch;
    }
    let d1 = config.stages[0].dim as u64;
    stem += config.stem_freq() as u64 * ch * d1 + d1;
    let blocks: u64 = config.block_plan().iter().map(|(_, b)| block_params(b)).sum();
    let head = config
        .output_vocab
        .map_or(0, |v| (config.output_dim() * v + v) as u64);
    Ok(stem + blocks + head)
}

/// Which term dominates a memory estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Dominant {
    Attention,
    Hidden,
}

/// Activation elements kept for a backward pass: every attention weight
/// map, each block's output and FFN hidden layer, and the stem outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryEstimate {
    pub frames: usize,
    pub attention: u64,
    pub hidden: u64,
    pub total: u64,
    pub dominated_by: Dominant,
}

pub fn memory_estimate(config: &EncoderConfig, frames: usize) -> Result<MemoryEstimate> {
    config.validate()?;
    let mut hidden = 0u64;
    let ch = config.stem_channels as u64;
    let (mut n, mut f) = (frames as u64, config.input_features as u64);
    for _ in 0..config.stem_layers() {
        n = n.div_ceil(2);
        f = f.div_ceil(2);
        hidden += n * f * ch;
    }
    let mut attention = 0u64;
    let mut n = n as usize;
    for (_, b) in config.block_plan() {
        attention += score_map_elems(b.attention_variant(), n, b.heads);
        hidden += (n * b.d_in * (1 + b.ffn_expansion)) as u64;
        n = b.output_len(n);
    }
    Ok(MemoryEstimate {
        frames,
        attention,
        hidden,
        total: attention + hidden,
        dominated_by: if attention > hidden { Dominant::Attention } else { Dominant::Hidden },
    })
}

/// First length in `lengths` (ascending) where `a` needs more memory than
/// `b` after needing no more at the previous length.
pub fn memory_crossover(a: &EncoderConfig, b: &EncoderConfig, lengths: &[usize]) -> Result<Option<usize>> {
    let mut prev_le = false;
    for &n in lengths {
        let le = memory_estimate(a, n)?.total <= memory_estimate(b, n)?.total;
        if prev_le && !le {
            return Ok(Some(n));
        }
        prev_le = le;
    }
    Ok(None)
}
