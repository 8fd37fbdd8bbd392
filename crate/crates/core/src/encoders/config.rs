use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Temporal mixing used by the cross-frame module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrossFrameVariant {
    SelfAttention,
    Conv3d,
}

impl fmt::Display for CrossFrameVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossFrameVariant::SelfAttention => "self_attention",
            CrossFrameVariant::Conv3d => "conv3d",
        })
    }
}

impl FromStr for CrossFrameVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attention" | "self-attention" | "attention" | "self" => {
                Ok(CrossFrameVariant::SelfAttention)
            }
            "conv3d" | "conv" => Ok(CrossFrameVariant::Conv3d),
            other => Err(Error::Config(format!(
                "unknown cross-frame variant {other:?}"
            ))),
        }
    }
}

/// Which parts of the branch are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Switches {
    pub cross_frame: bool,
    pub intra_frame: bool,
    /// Branch beside the backbone (true) or appended after it (false).
    pub branch: bool,
    pub multilevel: bool,
}

impl Switches {
    pub const ALL: Switches = Switches {
        cross_frame: true,
        intra_frame: true,
        branch: true,
        multilevel: true,
    };

    pub const NONE: Switches = Switches {
        cross_frame: false,
        intra_frame: false,
        branch: false,
        multilevel: false,
    };

    /// No submodule is active, so the model is the mean-pool baseline.
    pub fn is_baseline(&self) -> bool {
        !self.cross_frame && !self.intra_frame
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Frames per clip.
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Embedding width.
    pub dim: usize,
    /// Backbone layer count.
    pub depth: usize,
    pub heads: usize,
    /// Number of branch layers.
    pub branch_layers: usize,
    pub level_interval: usize,
    /// 1-based backbone layer feeding the last branch layer.
    pub level_range_end: usize,
    pub cross_frame_variant: CrossFrameVariant,
    pub switches: Switches,
    pub dropout_p: f64,
    pub zero_init_branch: bool,
    /// Initialize each intra-frame module from the backbone layer it reads.
    pub intra_init_from_backbone: bool,
    pub text_vocab: usize,
    pub text_len: usize,
    pub text_depth: usize,
    pub nce_temperature: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            grid_h: 4,
            grid_w: 4,
            patch_size: 4,
            channels: 1,
            dim: 64,
            depth: 8,
            heads: 4,
            branch_layers: 4,
            level_interval: 1,
            level_range_end: 8,
            cross_frame_variant: CrossFrameVariant::SelfAttention,
            switches: Switches::ALL,
            dropout_p: 0.0,
            zero_init_branch: false,
            intra_init_from_backbone: false,
            text_vocab: 64,
            text_len: 8,
            text_depth: 2,
            nce_temperature: 0.05,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Patch tokens per frame.
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn frame_height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn frame_width(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn bottleneck(&self) -> usize {
        self.dim / 8
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 || self.grid_h == 0 || self.grid_w == 0 || self.patch_size == 0 {
            return fail("frames, grid and patch size must be positive".into());
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 {
            return fail("channels, dim and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.dim % 8 != 0 {
            return fail(format!("dim {} not divisible by 8", self.dim));
        }
        if self.depth == 0 {
            return fail("depth must be positive".into());
        }
        if self.branch_layers == 0 || self.branch_layers > self.depth {
            return fail(format!(
                "branch layer count {} must be in [1, depth = {}]",
                self.branch_layers, self.depth
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.text_vocab < 2 || self.text_len == 0 {
            return fail("text vocab must hold at least 2 tokens and text_len be positive".into());
        }
        if self.nce_temperature <= 0.0 {
            return fail(format!(
                "nce temperature {} must be > 0",
                self.nce_temperature
            ));
        }
        if self.ln_eps <= 0.0 {
            return fail("layer norm eps must be > 0".into());
        }
        select_levels(self)?;
        Ok(())
    }
}

/// Backbone layers (1-based, ascending) whose outputs feed the branch layers.
///
/// The last index is `level_range_end`; earlier ones step back by `level_interval`.
pub fn select_levels(config: &ModelConfig) -> Result<Vec<usize>> {
    let k = config.branch_layers;
    let step = config.level_interval;
    let end = config.level_range_end;
    if k == 0 || step == 0 {
        return Err(Error::Config(
            "branch layers and level interval must be positive".into(),
        ));
    }
    if k > config.depth {
        return Err(Error::Config(format!(
            "{} branch layers exceed backbone depth {}",
            k, config.depth
        )));
    }
    if end == 0 || end > config.depth {
        return Err(Error::Config(format!(
            "level range end {} outside [1, {}]",
            end, config.depth
        )));
    }
    let span = (k - 1) * step;
    if span >= end {
        return Err(Error::Config(format!(
            "levels underflow: end {} - ({} - 1) * interval {} < 1",
            end, k, step
        )));
    }
    Ok((0..k).map(|i| end - span + i * step).collect())
}
