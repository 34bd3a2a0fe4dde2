//! Conformer sublayers and the block that chains them.
//!
//! Block layout: half-step FFN, MHSA, convolution module, half-step FFN,
//! post layer norm. A downsampling block halves the sequence either in the
//! convolution module (strided depthwise conv) or in the attention module
//! (strided queries); in both cases the width change `d_in → d_out` happens
//! in the convolution module.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::attention::{mhsa, AttentionParams, AttentionVariant, RelPosTable};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Param, Var};
use crate::nn::{DepthwiseConv, Init, LayerNorm, Linear, Module};

/// Where (if anywhere) a block halves the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Downsample {
    #[default]
    None,
    Conv,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub variant: AttentionVariant,
    pub downsample: Downsample,
    pub ffn_expansion: usize,
    pub dropout: f64,
}

impl BlockConfig {
    pub fn new(d: usize, heads: usize, conv_kernel: usize) -> Self {
        Self {
            d_in: d,
            d_out: d,
            heads,
            conv_kernel,
            variant: AttentionVariant::Regular,
            downsample: Downsample::None,
            ffn_expansion: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(config_err("block dims must be >= 1"));
        }
        if self.downsample == Downsample::None && self.d_in != self.d_out {
            return Err(config_err(format!(
                "a block without downsampling must keep its width ({} -> {})",
                self.d_in, self.d_out
            )));
        }
        if 2 * self.d_out < self.d_in {
            return Err(config_err(format!(
                "conv module expansion needs 2*d_out >= d_in ({} vs {})",
                self.d_out, self.d_in
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(config_err(format!("conv kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.heads == 0 || !self.d_in.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "block dim {} not divisible by {} heads",
                self.d_in, self.heads
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(config_err("ffn expansion must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.variant.validate()
    }

    /// Variant actually run by the attention module.
    pub fn attention_variant(&self) -> AttentionVariant {
        match self.downsample {
            Downsample::Attention => AttentionVariant::Strided(2),
            _ => self.variant,
        }
    }

    pub fn output_len(&self, n: usize) -> usize {
        match self.downsample {
            Downsample::None => n,
            _ => n.div_ceil(2),
        }
    }
}

fn drop(g: &Graph, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => g.dropout(&x, p, r),
        _ => Ok(x),
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// `x + 0.5 · W2 swish(W1 LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, d: usize, expansion: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, d),
            up: Linear::new(init, d, expansion * d, true),
            down: Linear::new(init, expansion * d, d, true),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var, dropout: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = g.swish(&self.up.forward(g, &h)?);
        let h = drop(g, self.down.forward(g, &h)?, dropout, rng)?;
        g.add(x, &g.scale(&h, 0.5))
    }
}

impl Module for FeedForward {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.up.params());
        v.extend(self.down.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.up.params_mut());
        v.extend(self.down.params_mut());
        v
    }
}

/// Convolution module, optionally downsampling and widening.
///
/// Main path: LN, pointwise `d_in → 2·d_out`, GLU, depthwise conv (stride 1
/// or 2), LN, swish, pointwise `d_out → d_out`. Residual: average pooled when
/// strided, projected when the width changes.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: DepthwiseConv,
    pub mid_norm: LayerNorm,
    pub project: Linear,
    pub residual: Option<Linear>,
}

impl ConvModule {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, d_in),
            expand: Linear::new(init, d_in, 2 * d_out, true),
            depthwise: DepthwiseConv::new(init, kernel, d_out, stride),
            mid_norm: LayerNorm::new(init, d_out),
            project: Linear::new(init, d_out, d_out, true),
            residual: (d_in != d_out).then(|| Linear::new(init, d_in, d_out, true)),
        }
    }

    pub fn stride(&self) -> usize {
        self.depthwise.stride
    }

    pub fn forward(&self, g: &Graph, x: &Var, dropout: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = g.glu(&self.expand.forward(g, &h)?)?;
        let h = self.depthwise.forward(g, &h)?;
        let h = g.swish(&self.mid_norm.forward(g, &h)?);
        let h = drop(g, self.project.forward(g, &h)?, dropout, rng)?;
        let mut r = x.clone();
        if self.stride() > 1 {
            r = g.avg_pool1d(&r, self.stride())?;
        }
        if let Some(p) = &self.residual {
            r = p.forward(g, &r)?;
        }
        g.add(&h, &r)
    }
}

impl Module for ConvModule {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.expand.params());
        v.extend(self.depthwise.params());
        v.extend(self.mid_norm.params());
        v.extend(self.project.params());
        if let Some(r) = &self.residual {
            v.extend(r.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.expand.params_mut());
        v.extend(self.depthwise.params_mut());
        v.extend(self.mid_norm.params_mut());
        v.extend(self.project.params_mut());
        if let Some(r) = &mut self.residual {
            v.extend(r.params_mut());
        }
        v
    }
}

/// Pre-norm attention with residual; the residual is average pooled when
/// the variant strides the queries.
#[derive(Debug, Clone)]
pub struct MhsaModule {
    pub norm: LayerNorm,
    pub attention: AttentionParams,
}

impl MhsaModule {
    pub fn new(init: &mut Init, d: usize, heads: usize, variant: AttentionVariant) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(init, d),
            attention: AttentionParams::new(init, d, heads, variant.uses_positions())?,
        })
    }

    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        table: Option<&RelPosTable>,
        variant: AttentionVariant,
        dropout: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = drop(g, mhsa(g, &h, &self.attention, table, variant)?, dropout, rng)?;
        let r = match variant {
            AttentionVariant::Strided(s) if s > 1 => g.avg_pool1d(x, s)?,
            _ => x.clone(),
        };
        g.add(&h, &r)
    }
}

impl Module for MhsaModule {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.attention.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.attention.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub config: BlockConfig,
    pub ffn1: FeedForward,
    pub mhsa: MhsaModule,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub post_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(init: &mut Init, config: BlockConfig) -> Result<Self> {
        config.validate()?;
        let BlockConfig { d_in, d_out, .. } = config;
        let conv_stride = if config.downsample == Downsample::Conv { 2 } else { 1 };
        Ok(Self {
            config,
            ffn1: FeedForward::new(init, d_in, config.ffn_expansion),
            mhsa: MhsaModule::new(init, d_in, config.heads, config.attention_variant())?,
            conv: ConvModule::new(init, d_in, d_out, config.conv_kernel, conv_stride),
            ffn2: FeedForward::new(init, d_out, config.ffn_expansion),
            post_norm: LayerNorm::new(init, d_out),
        })
    }

    /// `x: [n, d_in] → [output_len(n), d_out]`. `rng` enables dropout.
    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        table: Option<&RelPosTable>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let h = self.ffn1.forward(g, x, p, reborrow(&mut rng))?;
        let h = self
            .mhsa
            .forward(g, &h, table, self.config.attention_variant(), p, reborrow(&mut rng))?;
        let h = self.conv.forward(g, &h, p, reborrow(&mut rng))?;
        let h = self.ffn2.forward(g, &h, p, reborrow(&mut rng))?;
        self.post_norm.forward(g, &h)
    }
}

impl Module for ConformerBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.ffn1.params();
        v.extend(self.mhsa.params());
        v.extend(self.conv.params());
        v.extend(self.ffn2.params());
        v.extend(self.post_norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ffn1.params_mut();
        v.extend(self.mhsa.params_mut());
        v.extend(self.conv.params_mut());
        v.extend(self.ffn2.params_mut());
        v.extend(self.post_norm.params_mut());
        v
    }
}
