//! Encoder configuration, presets and the assembled model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::attention::{table_len_for, AttentionVariant, RelPosTable};
use crate::blocks::{BlockConfig, ConformerBlock, Downsample};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Param, Var};
use crate::nn::{Init, Linear, Module};
use crate::tensor::Tensor;

/// Shortest input the encoders accept.
pub const MIN_FRAMES: usize = 8;

pub const PRESETS: [&str; 8] = [
    "conformer-ctc-s",
    "conformer-ctc-m",
    "conformer-ctc-l",
    "conformer-rnnt-s",
    "effconf-ctc-s",
    "effconf-ctc-m",
    "effconf-ctc-l",
    "effconf-rnnt-s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Arch {
    /// Constant width, 4× two-conv stem.
    Conformer,
    /// Three stages with 2× stem and two 2× downsampling blocks.
    Efficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DownsampleMethod {
    #[default]
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub att_group_size: usize,
    /// Local attention window; takes precedence over grouping.
    pub att_window: Option<usize>,
    /// Linear attention; takes precedence over window and grouping.
    #[cfg_attr(feature = "serde", serde(default))]
    pub att_linear: bool,
    pub downsample_at_end: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub downsample_method: DownsampleMethod,
}

impl StageConfig {
    pub fn new(blocks: usize, dim: usize, heads: usize, conv_kernel: usize) -> Self {
        Self {
            blocks,
            dim,
            heads,
            conv_kernel,
            att_group_size: 1,
            att_window: None,
            att_linear: false,
            downsample_at_end: false,
            downsample_method: DownsampleMethod::Conv,
        }
    }

    pub fn variant(&self) -> AttentionVariant {
        if self.att_linear {
            AttentionVariant::Linear
        } else if let Some(w) = self.att_window {
            AttentionVariant::Local(w)
        } else if self.att_group_size == 1 {
            AttentionVariant::Regular
        } else {
            AttentionVariant::Grouped(self.att_group_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub arch: Arch,
    pub stages: Vec<StageConfig>,
    pub input_features: usize,
    pub stem_channels: usize,
    /// CTC vocabulary (blank included); `None` builds the encoder alone.
    pub output_vocab: Option<usize>,
    pub ffn_expansion: usize,
    pub dropout: f64,
}

fn efficient(blocks: [usize; 3], dims: [usize; 3], heads: usize, vocab: Option<usize>) -> EncoderConfig {
    let stages = (0..3)
        .map(|i| StageConfig {
            att_group_size: if i == 0 { 3 } else { 1 },
            downsample_at_end: i < 2,
            ..StageConfig::new(blocks[i], dims[i], heads, 15)
        })
        .collect();
    EncoderConfig {
        arch: Arch::Efficient,
        stages,
        input_features: 80,
        stem_channels: dims[0],
        output_vocab: vocab,
        ffn_expansion: 4,
        dropout: 0.0,
    }
}

fn conformer(blocks: usize, dim: usize, heads: usize, vocab: Option<usize>) -> EncoderConfig {
    EncoderConfig {
        arch: Arch::Conformer,
        stages: vec![StageConfig::new(blocks, dim, heads, 31)],
        input_features: 80,
        stem_channels: dim,
        output_vocab: vocab,
        ffn_expansion: 4,
        dropout: 0.0,
    }
}

impl EncoderConfig {
    /// Compiled-in architecture by name (see [`PRESETS`]).
    pub fn preset(name: &str) -> Result<Self> {
        let ctc = Some(256);
        Ok(match name {
            "conformer-ctc-s" => conformer(16, 176, 4, ctc),
            "conformer-ctc-m" => conformer(18, 256, 4, ctc),
            "conformer-ctc-l" => conformer(18, 512, 8, ctc),
            "conformer-rnnt-s" => conformer(16, 144, 4, None),
            "effconf-ctc-s" => efficient([5, 5, 5], [120, 168, 240], 4, ctc),
            "effconf-ctc-m" => efficient([5, 6, 5], [180, 256, 360], 4, ctc),
            "effconf-ctc-l" => efficient([5, 6, 5], [360, 512, 720], 8, ctc),
            "effconf-rnnt-s" => efficient([5, 5, 5], [100, 140, 200], 4, None),
            other => {
                return Err(config_err(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Sets every stage's group size (and clears windows / linear attention).
    pub fn with_group_sizes(mut self, sizes: &[usize]) -> Result<Self> {
        self.per_stage(sizes, |s, g| {
            s.att_group_size = g;
            s.att_window = None;
            s.att_linear = false;
        })?;
        Ok(self)
    }

    /// Sets local windows per stage; `None` means full attention.
    pub fn with_windows(mut self, windows: &[Option<usize>]) -> Result<Self> {
        self.per_stage(windows, |s, w| {
            s.att_window = w;
            s.att_group_size = 1;
            s.att_linear = false;
        })?;
        Ok(self)
    }

    pub fn with_linear_attention(mut self) -> Self {
        for s in &mut self.stages {
            s.att_linear = true;
        }
        self
    }

    pub fn with_downsample_method(mut self, method: DownsampleMethod) -> Self {
        for s in &mut self.stages {
            s.downsample_method = method;
        }
        self
    }

    fn per_stage<T: Copy>(&mut self, values: &[T], mut set: impl FnMut(&mut StageConfig, T)) -> Result<()> {
        if values.len() != self.stages.len() {
            return Err(config_err(format!(
                "expected {} per-stage values, got {}",
                self.stages.len(),
                values.len()
            )));
        }
        for (s, &v) in self.stages.iter_mut().zip(values) {
            set(s, v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        match self.arch {
            Arch::Efficient => {
                if self.stages.len() != 3 {
                    problems.push(format!("efficient arch needs exactly 3 stages, got {}", self.stages.len()));
                } else if !(self.stages[0].downsample_at_end
                    && self.stages[1].downsample_at_end
                    && !self.stages[2].downsample_at_end)
                {
                    problems.push("efficient arch downsamples at the end of stages 1 and 2 only".into());
                }
            }
            Arch::Conformer => {
                if self.stages.len() != 1 {
                    problems.push(format!("conformer arch needs exactly 1 stage, got {}", self.stages.len()));
                } else if self.stages[0].downsample_at_end {
                    problems.push("conformer arch does not downsample inside the encoder".into());
                }
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let i = i + 1;
            if s.blocks == 0 {
                problems.push(format!("stage {i}: blocks must be >= 1"));
            }
            if s.heads == 0 || s.dim % s.heads != 0 {
                problems.push(format!("stage {i}: dim {} not divisible by {} heads", s.dim, s.heads));
            }
            if s.dim % 2 != 0 {
                problems.push(format!("stage {i}: dim {} must be even for positional encodings", s.dim));
            }
            if s.conv_kernel % 2 == 0 {
                problems.push(format!("stage {i}: conv kernel {} must be odd", s.conv_kernel));
            }
            if s.att_group_size == 0 || s.att_window == Some(0) {
                problems.push(format!("stage {i}: group size and window must be >= 1"));
            }
        }
        for w in self.stages.windows(2) {
            if 2 * w[1].dim < w[0].dim {
                problems.push(format!("stage widths {} -> {} need 2*d_out >= d_in", w[0].dim, w[1].dim));
            }
        }
        if self.input_features == 0 || self.stem_channels == 0 {
            problems.push("input_features and stem_channels must be >= 1".into());
        }
        if self.output_vocab.is_some_and(|v| v < 2) {
            problems.push("output_vocab must be >= 2 (blank plus one label)".into());
        }
        if self.ffn_expansion == 0 {
            problems.push("ffn_expansion must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Number of stride-2 convolutions in the stem.
    pub fn stem_layers(&self) -> usize {
        match self.arch {
            Arch::Efficient => 1,
            Arch::Conformer => 2,
        }
    }

    /// Frequency bins left after the stem.
    pub fn stem_freq(&self) -> usize {
        (0..self.stem_layers()).fold(self.input_features, |f, _| f.div_ceil(2))
    }

    /// Length after the stem.
    pub fn stem_len(&self, t: usize) -> usize {
        (0..self.stem_layers()).fold(t, |n, _| n.div_ceil(2))
    }

    /// Every block in order with its stage index.
    pub fn block_plan(&self) -> Vec<(usize, BlockConfig)> {
        let mut plan = Vec::new();
        for (si, s) in self.stages.iter().enumerate() {
            for b in 0..s.blocks {
                let last = b + 1 == s.blocks;
                let mut c = BlockConfig::new(s.dim, s.heads, s.conv_kernel);
                c.variant = s.variant();
                c.ffn_expansion = self.ffn_expansion;
                c.dropout = self.dropout;
                if last && s.downsample_at_end {
                    c.d_out = self.stages.get(si + 1).map_or(s.dim, |n| n.dim);
                    c.downsample = match s.downsample_method {
                        DownsampleMethod::Conv => Downsample::Conv,
                        DownsampleMethod::Attention => Downsample::Attention,
                    };
                }
                plan.push((si, c));
            }
        }
        plan
    }

    /// Encoder output length for `t` input frames.
    pub fn output_len(&self, t: usize) -> usize {
        self.block_plan()
            .iter()
            .fold(self.stem_len(t), |n, (_, b)| b.output_len(n))
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.dim)
    }
}

/// Stride-2 3×3 convolutions (each followed by swish), then a linear map of
/// the flattened `freq × channels` to the first stage width.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: Vec<(Param, Param)>,
    pub proj: Linear,
}

impl Stem {
    fn new(init: &mut Init, config: &EncoderConfig) -> Self {
        let c = config.stem_channels;
        let convs = (0..config.stem_layers())
            .map(|i| {
                let ci = if i == 0 { 1 } else { c };
                (init.uniform(&[3, 3, ci, c], 9 * ci), init.zeros(&[c]))
            })
            .collect();
        let flat = config.stem_freq() * c;
        Self {
            convs,
            proj: Linear::new(init, flat, config.stages[0].dim, true),
        }
    }

    /// `[t, f] → [t', d1]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let (t, f) = (x.shape()[0], x.shape()[1]);
        let mut h = g.reshape(x, &[t, f, 1])?;
        for (w, b) in &self.convs {
            h = g.conv2d(&h, &g.param(w), 2)?;
            h = g.swish(&g.add_bias(&h, &g.param(b))?);
        }
        let s = h.shape().to_vec();
        let h = g.reshape(&h, &[s[0], s[1] * s[2]])?;
        self.proj.forward(g, &h)
    }
}

impl Module for Stem {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.convs.iter().flat_map(|(w, b)| [w, b]).collect();
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.convs.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        v.extend(self.proj.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[n_out, d_enc]`.
    pub sequence: Var,
    pub out_length: usize,
    /// `[n_out, vocab]` when the model has a CTC head.
    pub log_probs: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub stem: Stem,
    pub blocks: Vec<(usize, ConformerBlock)>,
    pub head: Option<Linear>,
}

impl EncoderModel {
    /// Deterministic initialization from `seed`.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let stem = Stem::new(&mut init, config);
        let blocks = config
            .block_plan()
            .into_iter()
            .map(|(si, c)| Ok((si, ConformerBlock::new(&mut init, c)?)))
            .collect::<Result<Vec<_>>>()?;
        let head = config
            .output_vocab
            .map(|v| Linear::new(&mut init, config.output_dim(), v, true));
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            head,
        })
    }

    /// `features: [t, input_features]`. Passing `rng` enables dropout.
    pub fn forward(&self, g: &Graph, features: &Var, mut rng: Option<&mut dyn RngCore>) -> Result<EncodedBatch> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.config.input_features {
            return Err(crate::error::dim_err(
                "encoder input",
                s,
                &[self.config.input_features],
            ));
        }
        if s[0] < MIN_FRAMES {
            return Err(Error::InputTooShort {
                frames: s[0],
                min: MIN_FRAMES,
            });
        }
        let mut h = self.stem.forward(g, features)?;
        let mut stage = usize::MAX;
        let mut table: Option<RelPosTable> = None;
        for (si, block) in &self.blocks {
            if *si != stage {
                stage = *si;
                table = self.stage_table(stage, h.shape()[0])?;
            }
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            h = block.forward(g, &h, table.as_ref(), r)?;
        }
        let log_probs = match &self.head {
            Some(head) => Some(g.log_softmax(&head.forward(g, &h)?, 1)?),
            None => None,
        };
        Ok(EncodedBatch {
            out_length: h.shape()[0],
            sequence: h,
            log_probs,
        })
    }

    /// Positional table covering every block of `stage` at entry length `n`.
    fn stage_table(&self, stage: usize, n: usize) -> Result<Option<RelPosTable>> {
        let need = self
            .blocks
            .iter()
            .filter(|(si, b)| *si == stage && b.config.attention_variant().uses_positions())
            .map(|(_, b)| table_len_for(b.config.attention_variant(), n))
            .max();
        need.map(|n_max| RelPosTable::new(n_max, self.config.stages[stage].dim))
            .transpose()
    }
}

impl Module for EncoderModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for (_, b) in &self.blocks {
            v.extend(b.params());
        }
        if let Some(h) = &self.head {
            v.extend(h.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for (_, b) in &mut self.blocks {
            v.extend(b.params_mut());
        }
        if let Some(h) = &mut self.head {
            v.extend(h.params_mut());
        }
        v
    }
}

/// Masking parameters: `F` is the maximum frequency band width and each
/// time mask is at most `floor(p_s · t)` frames wide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecAugment {
    pub freq_mask_param: usize,
    pub freq_masks: usize,
    pub time_masks: usize,
    pub time_ratio: f64,
}

impl Default for SpecAugment {
    fn default() -> Self {
        Self {
            freq_mask_param: 27,
            freq_masks: 2,
            time_masks: 5,
            time_ratio: 0.05,
        }
    }
}

impl SpecAugment {
    /// Zeroes random bands of `features: [t, f]`.
    pub fn apply<R: Rng + ?Sized>(&self, features: &Tensor, rng: &mut R) -> Tensor {
        let mut out = features.clone();
        if features.rank() != 2 {
            return out;
        }
        let (t, f) = (features.shape()[0], features.shape()[1]);
        for _ in 0..self.freq_masks {
            let width = rng.gen_range(0..=self.freq_mask_param).min(f);
            let start = rng.gen_range(0..=f - width);
            for r in 0..t {
                out.data_mut()[r * f + start..r * f + start + width].fill(0.0);
            }
        }
        let max_t = libm::floor(self.time_ratio * t as f64) as usize;
        for _ in 0..self.time_masks {
            let width = rng.gen_range(0..=max_t).min(t);
            let start = rng.gen_range(0..=t - width);
            out.data_mut()[start * f..(start + width) * f].fill(0.0);
        }
        out
    }
}
