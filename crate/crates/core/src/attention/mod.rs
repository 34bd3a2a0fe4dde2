//! Multi-head self-attention with relative sinusoidal position scores.
//!
//! Every variant projects `X ∈ R^{n×d}` to per-head queries, keys and values,
//! adds the relative score `S_rel[i,j] = Q_i · E_{j-i}` (with `E = R W^E`) to
//! the content score, and normalizes by `sqrt(d_h)`. The variants differ in
//! which positions interact:
//!
//! | variant        | queries           | keys/values       | score map     |
//! |----------------|-------------------|-------------------|---------------|
//! | regular        | all `n`           | all `n`           | `n × n`       |
//! | strided(s)     | rows `0, s, 2s…`  | all `n`           | `⌈n/s⌉ × n`   |
//! | grouped(g)     | `g` rows per slot | `g` rows per slot | `n/g × n/g`   |
//! | local(w)       | within block      | within block      | `w × w` each  |
//! | linear         | row softmax       | column softmax    | none (`d_h²`) |

mod mhsa;
pub mod reference;
mod skew;
mod table;

use alloc::format;
use alloc::vec::Vec;

pub use mhsa::{mhsa, mhsa_grouped, mhsa_linear, mhsa_local, mhsa_regular, mhsa_strided, table_len_for};
pub use skew::{rel_to_abs, rel_to_abs_strided};
pub use table::{sinusoid_entry, RelPosTable};

use crate::error::{config_err, Result};
use crate::graph::Param;
use crate::nn::{Init, Linear, Module};

/// Attention flavour and its size parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AttentionVariant {
    Regular,
    /// Query stride `s`.
    Strided(usize),
    /// Group size `g`.
    Grouped(usize),
    /// Window `w_att`.
    Local(usize),
    Linear,
}

impl AttentionVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Strided(0) | Self::Grouped(0) | Self::Local(0) => {
                Err(config_err(format!("attention parameter must be >= 1 in {self:?}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the variant uses relative position scores.
    pub fn uses_positions(&self) -> bool {
        !matches!(self, Self::Linear)
    }

    /// Output length for an input of length `n`.
    pub fn output_len(&self, n: usize) -> usize {
        match *self {
            Self::Strided(s) => n.div_ceil(s),
            _ => n,
        }
    }
}

/// Projection weights for one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub d: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// `W^E: [d, d]`, absent for linear attention.
    pub position: Option<Param>,
}

impl AttentionParams {
    pub fn new(init: &mut Init, d: usize, heads: usize, with_position: bool) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(config_err(format!("model dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            d,
            heads,
            query: Linear::new(init, d, d, true),
            key: Linear::new(init, d, d, true),
            value: Linear::new(init, d, d, true),
            output: Linear::new(init, d, d, true),
            position: with_position.then(|| init.uniform(&[d, d], d)),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "model dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !self.params().iter().all(|p| p.value().is_finite()) {
            return Err(config_err("attention weights must be finite"));
        }
        Ok(())
    }
}

impl Module for AttentionParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.query.params();
        v.extend(self.key.params());
        v.extend(self.value.params());
        v.extend(self.output.params());
        v.extend(self.position.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.query.params_mut();
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.output.params_mut());
        v.extend(self.position.as_mut());
        v
    }
}
