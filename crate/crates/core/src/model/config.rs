use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    C2A2,
    C3A4,
    C4A8,
    Custom,
}

impl Variant {
    pub const PRESETS: [Variant; 3] = [Variant::C2A2, Variant::C3A4, Variant::C4A8];

    pub fn conv_blocks(self) -> Option<usize> {
        match self {
            Variant::C2A2 => Some(2),
            Variant::C3A4 => Some(3),
            Variant::C4A8 => Some(4),
            Variant::Custom => None,
        }
    }

    pub fn attn_depth(self) -> Option<usize> {
        match self {
            Variant::C2A2 => Some(2),
            Variant::C3A4 => Some(4),
            Variant::C4A8 => Some(8),
            Variant::Custom => None,
        }
    }

    /// Per-block pool windows for a square input of the given extent.
    /// Not every block halves; some keep their extent and some reduce by 4.
    pub fn pool_windows(self, input: usize) -> Option<Vec<usize>> {
        let w = match (self, input) {
            (Variant::C2A2, 32) => vec![2, 2],
            (Variant::C2A2, 64) => vec![4, 2],
            (Variant::C2A2, 128) => vec![4, 4],
            (Variant::C3A4, 32) => vec![2, 1, 2],
            (Variant::C3A4, 64) => vec![2, 2, 2],
            (Variant::C3A4, 128) => vec![4, 2, 2],
            (Variant::C4A8, 32) => vec![2, 1, 2, 1],
            (Variant::C4A8, 64) => vec![2, 2, 2, 1],
            (Variant::C4A8, 128) => vec![2, 2, 2, 2],
            _ => return None,
        };
        Some(w)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::C2A2 => "c2a2",
            Variant::C3A4 => "c3a4",
            Variant::C4A8 => "c4a8",
            Variant::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c2a2" => Ok(Variant::C2A2),
            "c3a4" => Ok(Variant::C3A4),
            "c4a8" => Ok(Variant::C4A8),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// How convolution kernels are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvLayout {
    /// One independent conv stack per attention group; each sees the raw
    /// image and produces that group's tokens. Required for multi-worker runs.
    #[default]
    Branched,
    /// A single conv stack whose final channels are sliced into groups.
    /// Single-worker only.
    Dense,
}

fn default_in_channels() -> usize {
    3
}
fn default_groups() -> usize {
    16
}
fn default_embedding() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_patch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "custom")]
    pub variant: Variant,
    /// `[height, width]`.
    pub input_size: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub kernels_per_block: Vec<usize>,
    pub pool_windows: Vec<usize>,
    #[serde(default = "default_groups")]
    pub num_attention_groups: usize,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
    pub attn_depth: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub conv_layout: ConvLayout,
    #[serde(default)]
    pub shared_attention: bool,
    #[serde(default)]
    pub ablate_conv: bool,
    #[serde(default)]
    pub ablate_attn: bool,
    /// Tile size of the linear patch embedding used when `ablate_conv` is set.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
}

fn custom() -> Variant {
    Variant::Custom
}

/// Extents along the conv chain for a fixed configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeLadder {
    pub input: (usize, usize),
    /// `(kernels, height, width)` after each conv block.
    pub blocks: Vec<(usize, usize, usize)>,
    pub num_tokens: usize,
    pub embedding_dim: usize,
    pub num_groups: usize,
    pub tokens_per_group: usize,
}

impl ModelConfig {
    /// One of the three named variants at a square input size of 32, 64
    /// or 128, with kernel counts doubling from 64.
    pub fn preset(variant: Variant, input: usize, num_classes: usize) -> Result<Self> {
        let blocks = variant
            .conv_blocks()
            .ok_or_else(|| Error::Config("custom variant has no preset".into()))?;
        let pool_windows = variant
            .pool_windows(input)
            .ok_or_else(|| Error::Config(format!("no {variant} preset for input {input}; use 32, 64 or 128")))?;
        let cfg = Self {
            variant,
            input_size: [input, input],
            in_channels: 3,
            kernels_per_block: (0..blocks).map(|b| 64 << b).collect(),
            pool_windows,
            num_attention_groups: 16,
            embedding_dim: 64,
            attn_depth: variant.attn_depth().expect("preset variant"),
            num_heads: 4,
            num_classes,
            conv_layout: ConvLayout::Branched,
            shared_attention: false,
            ablate_conv: false,
            ablate_attn: false,
            patch_size: 8,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A very small custom configuration (1x8x8 input, two groups of four
    /// 4-dimensional tokens) for smoke tests and gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            variant: Variant::Custom,
            input_size: [8, 8],
            in_channels: 1,
            kernels_per_block: vec![4, 8],
            pool_windows: vec![2, 2],
            num_attention_groups: 2,
            embedding_dim: 4,
            attn_depth: 1,
            num_heads: 2,
            num_classes,
            conv_layout: ConvLayout::Branched,
            shared_attention: false,
            ablate_conv: false,
            ablate_attn: false,
            patch_size: 4,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn final_kernels(&self) -> usize {
        *self.kernels_per_block.last().unwrap_or(&0)
    }

    /// Number of image-level tokens `M`.
    pub fn num_tokens(&self) -> usize {
        if self.ablate_conv {
            let [h, w] = self.input_size;
            (h / self.patch_size) * (w / self.patch_size)
        } else {
            self.final_kernels()
        }
    }

    pub fn tokens_per_group(&self) -> usize {
        self.num_tokens() / self.num_attention_groups
    }

    /// Kernels of block `b` owned by one branch.
    pub fn branch_kernels(&self, block: usize) -> usize {
        match self.conv_layout {
            ConvLayout::Branched => self.kernels_per_block[block] / self.num_attention_groups,
            ConvLayout::Dense => self.kernels_per_block[block],
        }
    }

    pub fn shape_ladder(&self) -> Result<ShapeLadder> {
        let [mut h, mut w] = self.input_size;
        let mut blocks = Vec::with_capacity(self.kernels_per_block.len());
        for (b, (&k, &p)) in self.kernels_per_block.iter().zip(&self.pool_windows).enumerate() {
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::Config(format!(
                    "block {b}: extent {h}x{w} is not divisible by pool window {p}"
                )));
            }
            h /= p;
            w /= p;
            blocks.push((k, h, w));
        }
        Ok(ShapeLadder {
            input: (self.input_size[0], self.input_size[1]),
            blocks,
            num_tokens: self.num_tokens(),
            embedding_dim: self.embedding_dim,
            num_groups: self.num_attention_groups,
            tokens_per_group: self.tokens_per_group(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ablate_conv && self.ablate_attn {
            return bad("ablate_conv and ablate_attn cannot both be set".into());
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || self.in_channels == 0 {
            return bad(format!("input {h}x{w}x{} must be non-empty", self.in_channels));
        }
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1".into());
        }
        let kg = self.num_attention_groups;
        if kg == 0 {
            return bad("num_attention_groups must be positive".into());
        }
        if self.num_heads == 0 || !self.embedding_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embedding_dim {} is not divisible by num_heads {}",
                self.embedding_dim, self.num_heads
            ));
        }
        if !self.ablate_attn && self.attn_depth == 0 {
            return bad("attn_depth must be positive unless attention is ablated".into());
        }
        if self.ablate_conv {
            let p = self.patch_size;
            if p == 0 || h % p != 0 || w % p != 0 {
                return bad(format!("patch size {p} does not tile input {h}x{w}"));
            }
            if self.embedding_dim == 0 {
                return bad("embedding_dim must be positive".into());
            }
        } else {
            if self.kernels_per_block.is_empty() {
                return bad("at least one conv block is required".into());
            }
            if self.kernels_per_block.len() != self.pool_windows.len() {
                return bad(format!(
                    "{} kernel counts but {} pool windows",
                    self.kernels_per_block.len(),
                    self.pool_windows.len()
                ));
            }
            let ladder = self.shape_ladder()?;
            let &(_, fh, fw) = ladder.blocks.last().expect("non-empty");
            if fh * fw != self.embedding_dim {
                return bad(format!(
                    "final feature map {fh}x{fw} flattens to {} but embedding_dim is {}",
                    fh * fw,
                    self.embedding_dim
                ));
            }
            if self.conv_layout == ConvLayout::Branched {
                if let Some((b, k)) = self
                    .kernels_per_block
                    .iter()
                    .enumerate()
                    .find(|(_, &k)| k == 0 || k % kg != 0)
                {
                    return bad(format!("block {b} has {k} kernels, not divisible into {kg} branches"));
                }
            }
        }
        let m = self.num_tokens();
        if m == 0 || !m.is_multiple_of(kg) {
            return bad(format!("{m} tokens cannot be split into {kg} equal attention groups"));
        }
        Ok(())
    }

    /// Trainable parameter count, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let d = self.embedding_dim;
        let kg = self.num_attention_groups;
        let mut total = 0;
        if self.ablate_conv {
            let patch_dim = self.in_channels * self.patch_size * self.patch_size;
            total += kg * (patch_dim * d + d);
        } else {
            let branches = match self.conv_layout {
                ConvLayout::Branched => kg,
                ConvLayout::Dense => 1,
            };
            let mut in_c = self.in_channels;
            let mut per_branch = 0;
            for b in 0..self.kernels_per_block.len() {
                let out = self.branch_kernels(b);
                per_branch += out * in_c * 9 + out + out * out * 9 + out;
                in_c = out;
            }
            total += branches * per_branch;
        }
        if !self.ablate_attn {
            let block = 4 * (d * d + d) + 2 * d;
            let stacks = if self.shared_attention { 1 } else { kg };
            total += stacks * self.attn_depth * block + kg * d;
        }
        total + d * self.num_classes + self.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for v in Variant::PRESETS {
            for input in [32, 64, 128] {
                let cfg = ModelConfig::preset(v, input, 10).unwrap();
                assert_eq!(cfg.num_tokens(), cfg.final_kernels());
                assert_eq!(cfg.tokens_per_group() * 16, cfg.num_tokens());
            }
        }
        assert!(ModelConfig::preset(Variant::C2A2, 48, 10).is_err());
    }

    #[test]
    fn contradictory_ablation_is_rejected() {
        let mut cfg = ModelConfig::preset(Variant::C2A2, 32, 10).unwrap();
        cfg.ablate_attn = true;
        cfg.ablate_conv = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn group_count_must_divide_tokens() {
        let mut cfg = ModelConfig::preset(Variant::C2A2, 32, 10).unwrap();
        cfg.num_attention_groups = 48;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("48"), "{msg}");
    }

    #[test]
    fn unknown_toml_keys_are_rejected() {
        let base = ModelConfig::preset(Variant::C2A2, 32, 10).unwrap().to_toml();
        assert_eq!(ModelConfig::from_toml(&base).unwrap().num_classes, 10);
        let extra = format!("{base}\nmystery = 3\n");
        assert!(ModelConfig::from_toml(&extra).is_err());
    }

    #[test]
    fn dense_counts_follow_the_published_scaling() {
        let counts: Vec<usize> = Variant::PRESETS
            .iter()
            .map(|&v| {
                let mut cfg = ModelConfig::preset(v, 64, 200).unwrap();
                cfg.conv_layout = ConvLayout::Dense;
                cfg.param_count()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }
}
