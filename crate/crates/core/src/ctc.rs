//! Connectionist temporal classification: loss, gradient, greedy decoding
//! and an exhaustive-enumeration oracle. Blank is label 0.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Largest path count [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Frame log-probabilities `[T, V]` and a target over `1..V`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcInstance {
    pub log_probs: Tensor,
    pub labels: Vec<usize>,
}

impl CtcInstance {
    pub fn new(log_probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if log_probs.rank() != 2 || log_probs.shape()[1] < 2 {
            return Err(dim_err("ctc log_probs", log_probs.shape(), &[]));
        }
        let v = log_probs.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
            return Err(config_err(format!("label {bad} outside 1..{v}")));
        }
        Ok(Self { log_probs, labels })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.shape()[1]
    }
}

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcResult {
    /// `-log P(labels)`; `+∞` when no alignment exists.
    pub nll: f64,
    /// `∂ nll / ∂ log_probs`, zero when infeasible.
    pub grad: Tensor,
    pub feasible: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + libm::log1p(libm::exp(-(a - b).abs()))
}

/// Forward-backward over the blank-extended target in log space.
pub fn ctc_loss(inst: &CtcInstance) -> CtcResult {
    let (t_len, v) = (inst.frames(), inst.vocab());
    let lp = inst.log_probs.data();
    let mut ext = vec![BLANK; 2 * inst.labels.len() + 1];
    for (i, &l) in inst.labels.iter().enumerate() {
        ext[2 * i + 1] = l;
    }
    let s_len = ext.len();
    let infeasible = || CtcResult {
        nll: f64::INFINITY,
        grad: Tensor::zeros(inst.log_probs.shape()),
        feasible: false,
    };
    if t_len == 0 || min_frames(&inst.labels) > t_len {
        return infeasible();
    }
    // A state may be skipped into from two back when it is a label that
    // differs from the previous label.
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * v + ext[s]];
        }
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let from = |j: usize| beta[next + j] + lp[(t + 1) * v + ext[j]];
            let mut b = from(s);
            if s + 1 < s_len {
                b = log_add(b, from(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, from(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        log_add(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_p.is_finite() {
        return infeasible();
    }
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut acc = vec![neg; v];
        for s in 0..s_len {
            let k = ext[s];
            acc[k] = log_add(acc[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..v {
            grad[t * v + k] = -libm::exp(acc[k] - log_p);
        }
    }
    CtcResult {
        nll: -log_p,
        grad: Tensor::new(inst.log_probs.shape(), grad).expect("shape matches"),
        feasible: true,
    }
}

/// CTC loss as a graph node on `log_probs: [T, V]`.
pub fn ctc_loss_var(g: &Graph, log_probs: &Var, labels: &[usize]) -> Result<(Var, CtcResult)> {
    let inst = CtcInstance::new(log_probs.to_tensor(), labels.to_vec())?;
    let r = ctc_loss(&inst);
    let loss = g.external_loss(log_probs, r.nll, r.grad.data().to_vec())?;
    Ok((loss, r))
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Probability of `labels` by summing every frame-level path that collapses
/// to it. Refuses more than [`BRUTE_FORCE_LIMIT`] paths.
pub fn ctc_brute_force(inst: &CtcInstance) -> Result<f64> {
    let (t_len, v) = (inst.frames(), inst.vocab());
    let paths = (v as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let lp = inst.log_probs.data();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    for _ in 0..paths {
        if collapse(&path) == inst.labels {
            let logp: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * v + k]).sum();
            total += libm::exp(logp);
        }
        for digit in path.iter_mut() {
            *digit += 1;
            if *digit < v {
                break;
            }
            *digit = 0;
        }
    }
    Ok(total)
}

/// Per-frame argmax (first maximum wins), collapsed.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    if log_probs.rank() != 2 {
        return Vec::new();
    }
    let v = log_probs.shape()[1];
    let path: Vec<usize> = log_probs
        .data()
        .chunks(v)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect();
    collapse(&path)
}

/// Levenshtein distance between label sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}
