//! Architectural hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total downsampling of the image encoder: a stride-2 stem followed by three
/// stride-2 residual stages.
pub const ENCODER_STRIDE: usize = 16;

/// Maximum text length in tokens, including the begin/end markers.
pub const MAX_TEXT_LEN: usize = 100;

/// Whether the model sees one image (stage 1) or a past/current pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Single,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    /// Height and width of the (square) input image.
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    /// Feature width `E` of the output grid.
    pub embed_dim: usize,
    /// Group count of every group norm in the encoder.
    pub norm_groups: usize,
}

impl VisionConfig {
    /// Side length of the output grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    /// Number of grid cells `N`.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {ENCODER_STRIDE}",
                self.image_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config("in_channels must be 1 or 3".into()));
        }
        let widths = [self.stem_channels, self.stage_channels[0], self.stage_channels[1], self.stage_channels[2]];
        if self.norm_groups == 0 || widths.iter().any(|&c| c == 0 || c % self.norm_groups != 0) {
            return Err(Error::Config(format!(
                "every encoder width {widths:?} must be a positive multiple of norm_groups {}",
                self.norm_groups
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    /// Transformer width `D`.
    pub d_model: usize,
    /// Attention heads; 0 selects `max(1, D / 64)`.
    #[serde(default)]
    pub heads: usize,
    /// FFN hidden width; 0 selects `4 * D`.
    #[serde(default)]
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_dropout")]
    pub stochastic_depth: f64,
    pub mode: InputMode,
}

fn default_max_text_len() -> usize {
    MAX_TEXT_LEN
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Full-size geometry: 384px input, 24x24x1024 grid, D=768, 6+6 layers.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            vision: VisionConfig {
                image_size: 384,
                in_channels: 1,
                stem_channels: 64,
                stage_channels: [256, 512, 1024],
                embed_dim: 1024,
                norm_groups: 32,
            },
            d_model: 768,
            heads: 0,
            ffn_dim: 0,
            encoder_layers: 6,
            decoder_layers: 6,
            vocab_size,
            max_text_len: MAX_TEXT_LEN,
            dropout: 0.1,
            stochastic_depth: 0.1,
            mode: InputMode::Dual,
        }
    }

    /// Laptop-scale default: 64px input, 4x4x128 grid, D=64, 2+2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vision: VisionConfig {
                image_size: 64,
                in_channels: 1,
                stem_channels: 8,
                stage_channels: [16, 32, 64],
                embed_dim: 128,
                norm_groups: 4,
            },
            d_model: 64,
            heads: 0,
            ffn_dim: 0,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size,
            max_text_len: MAX_TEXT_LEN,
            dropout: 0.1,
            stochastic_depth: 0.1,
            mode: InputMode::Dual,
        }
    }

    /// Gradient-check size: 32px input (N=4), D=16, 1+1 layers.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vision: VisionConfig {
                image_size: 32,
                in_channels: 1,
                stem_channels: 4,
                stage_channels: [4, 4, 8],
                embed_dim: 8,
                norm_groups: 2,
            },
            d_model: 16,
            heads: 0,
            ffn_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size,
            max_text_len: MAX_TEXT_LEN,
            dropout: 0.0,
            stochastic_depth: 0.0,
            mode: InputMode::Dual,
        }
    }

    pub fn with_mode(mut self, mode: InputMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_heads(&self) -> usize {
        if self.heads == 0 {
            (self.d_model / 64).max(1)
        } else {
            self.heads
        }
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.d_model
        } else {
            self.ffn_dim
        }
    }

    pub fn num_patches(&self) -> usize {
        self.vision.num_patches()
    }

    /// Rows of the fused encoder input for an instruction of `text_len` tokens.
    pub fn fused_len(&self, text_len: usize) -> usize {
        match self.mode {
            InputMode::Dual => 2 * self.num_patches() + text_len,
            InputMode::Single => self.num_patches() + text_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        if self.d_model == 0 || self.d_model % self.num_heads() != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of the head count {}",
                self.d_model,
                self.num_heads()
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.max_text_len < 2 || self.max_text_len > MAX_TEXT_LEN {
            return Err(Error::Config(format!("max_text_len must be in 2..={MAX_TEXT_LEN}")));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.stochastic_depth) {
            return Err(Error::Config("dropout rates must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Maximum number of generated tokens after the begin marker.
    pub max_len: usize,
    pub strategy: DecodeStrategy,
    /// Exponent `alpha` in the beam score `logp / len^alpha`.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_len: MAX_TEXT_LEN,
            strategy: DecodeStrategy::Greedy,
            length_penalty: 1.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.max_len > MAX_TEXT_LEN {
            return Err(Error::Config(format!("max_len must be in 1..={MAX_TEXT_LEN}")));
        }
        if let DecodeStrategy::Beam { width: 0 } = self.strategy {
            return Err(Error::Config("beam width must be positive".into()));
        }
        Ok(())
    }
}
