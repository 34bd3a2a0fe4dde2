//! Central finite-difference checks of analytic gradients.
//!
//! The checked function may return any shape; it is contracted with a fixed
//! pseudo-random weight tensor so every output entry contributes to the loss.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Param, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Differences at or below this are treated as exact.
    pub abs_floor: f64,
    /// Upper bound on checked entries per input (evenly spaced).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-8,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Deterministic contraction weights in `[0.5, 1.5)` with alternating sign.
fn contraction(len: usize) -> Tensor {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    Tensor::from_fn(&[len], |i| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (0.5 + u)
    })
}

fn scalarize(g: &Graph, y: &Var) -> Result<Var> {
    let flat = g.reshape(y, &[y.value().numel()])?;
    let w = g.constant(contraction(flat.value().numel()));
    Ok(g.sum(&g.mul(&flat, &w)?))
}

fn sampled(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = if len <= max { 1 } else { len.div_ceil(max) };
    (0..len).step_by(step)
}

fn compare(
    analytic: &[Tensor],
    opts: &GradCheckOptions,
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for j in sampled(grad.numel(), opts.max_entries) {
            let plus = eval(t, j, opts.step)?;
            let minus = eval(t, j, -opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[j];
            let abs = libm::fabs(a - numeric);
            let rel = if abs <= opts.abs_floor {
                0.0
            } else {
                abs / libm::fmax(libm::fabs(a), libm::fabs(numeric))
            };
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalarize(&g, &f(&g, &leaves)?)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(v).unwrap()).collect();
    compare(&analytic, opts, |t, j, delta| {
        let g = Graph::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut x = x.clone();
                if i == t {
                    x.data_mut()[j] += delta;
                }
                g.constant(x)
            })
            .collect();
        Ok(scalarize(&g, &f(&g, &vars)?)?.value().item())
    })
}

/// Checks the gradient of `f` with respect to the weights returned by `params`.
///
/// `params` must list weights in a stable order; each numeric probe perturbs a
/// fresh clone of `model`.
pub fn check_params<M, P, F>(model: &M, params: P, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Param>,
    F: Fn(&M, &Graph) -> Result<Var>,
{
    let g = Graph::new();
    let loss = scalarize(&g, &f(model, &g)?)?;
    let grads = g.backward(&loss)?;
    let mut probe = model.clone();
    let analytic: Vec<Tensor> = params(&mut probe)
        .into_iter()
        .map(|p| grads.wrt_param(p).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(probe);
    compare(&analytic, opts, |t, j, delta| {
        let mut m = model.clone();
        params(&mut m)[t].make_mut().data_mut()[j] += delta;
        let g = Graph::inference();
        Ok(scalarize(&g, &f(&m, &g)?)?.value().item())
    })
}
