//! Encoder configuration files.
//!
//! A file is TOML mirroring `EncoderConfig`. With `base = "<preset>"` the
//! preset is loaded first and the file overrides it field by field; a stage
//! is overridden with a `[stages.N]` table (1-based). Without `base` the file
//! must describe the whole encoder, stages as `[[stages]]`. Unknown keys are
//! errors.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use effconf_core::encoder::{DownsampleMethod, EncoderConfig};
use toml::{Table, Value};

pub fn parse_config(text: &str) -> Result<EncoderConfig> {
    let mut doc: Table = text.parse().context("config is not valid TOML")?;
    let mut merged = match doc.remove("base") {
        Some(Value::String(name)) => match Value::try_from(EncoderConfig::preset(&name)?)? {
            Value::Table(t) => t,
            _ => unreachable!("structs serialize to tables"),
        },
        Some(other) => bail!("`base` must be a preset name, got {other}"),
        None => Table::new(),
    };
    for (key, value) in doc {
        match (key.as_str(), value) {
            ("stages", Value::Table(overrides)) => {
                let stages = match merged.get_mut("stages") {
                    Some(Value::Array(a)) => a,
                    _ => bail!("[stages.N] overrides need a `base` preset"),
                };
                for (idx, over) in overrides {
                    let i: usize = idx
                        .parse()
                        .ok()
                        .filter(|&i| i >= 1 && i <= stages.len())
                        .ok_or_else(|| anyhow!("stage index {idx:?} outside 1..={}", stages.len()))?;
                    let (Value::Table(over), Some(Value::Table(stage))) = (over, stages.get_mut(i - 1)) else {
                        bail!("[stages.{idx}] must be a table");
                    };
                    stage.extend(over);
                }
            }
            (_, value) => {
                merged.insert(key, value);
            }
        }
    }
    let config: EncoderConfig = Value::Table(merged)
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<EncoderConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

/// Serializes a config in the same format (always complete, no `base`).
pub fn render_config(config: &EncoderConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}

/// Command-line overrides of the attention layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub group_sizes: Option<Vec<usize>>,
    /// `None` entries keep full attention in that stage.
    pub windows: Option<Vec<Option<usize>>>,
    pub linear: bool,
    pub downsample: Option<DownsampleMethod>,
}

impl Overrides {
    pub fn apply(&self, mut config: EncoderConfig) -> Result<EncoderConfig> {
        if let Some(g) = &self.group_sizes {
            config = config.with_group_sizes(g)?;
        }
        if let Some(w) = &self.windows {
            config = config.with_windows(w)?;
        }
        if self.linear {
            config = config.with_linear_attention();
        }
        if let Some(m) = self.downsample {
            config = config.with_downsample_method(m);
        }
        config.validate()?;
        Ok(config)
    }

    /// Suffix describing the overrides, for report labels.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(g) = &self.group_sizes {
            parts.push(format!("g={}", join(g.iter().map(|v| v.to_string()))));
        }
        if let Some(w) = &self.windows {
            let items = w.iter().map(|v| v.map_or("-".to_string(), |x| x.to_string()));
            parts.push(format!("w={}", join(items)));
        }
        if self.linear {
            parts.push("linear".into());
        }
        match self.downsample {
            Some(DownsampleMethod::Attention) => parts.push("attn-down".into()),
            Some(DownsampleMethod::Conv) => parts.push("conv-down".into()),
            None => {}
        }
        if parts.is_empty() {
            String::new()
        } else {
            format!("[{}]", parts.join(";"))
        }
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

/// Parses `a,b,c`.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad number {p:?} in {s:?}")))
        .collect()
}

/// Parses `175,-,-`; `-` means no window.
pub fn parse_windows(s: &str) -> Result<Vec<Option<usize>>> {
    s.split(',')
        .map(|p| match p.trim() {
            "-" => Ok(None),
            v => v.parse().map(Some).with_context(|| format!("bad window {p:?} in {s:?}")),
        })
        .collect()
}
