use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::bank::{PseudoConfig, PseudoMode};
use crate::codec::CodecConfig;
use crate::error::{config_err, Result};

/// Network shape and loss settings. Every field is required in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Plain block width followed by the three perspective block widths.
    pub widths: [usize; 4],
    pub plain_layers: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    /// `false` builds the plain-attention baseline without codec or bank.
    pub use_pmp: bool,
    /// Feed the bank the spatial mean of `p` instead of the full map.
    pub pooled_descriptor: bool,
    pub prototypes: usize,
    pub rec_weight: f64,
    /// Which inputs of the reconstruction loss receive its gradient.
    pub rec_flow: RecFlow,
    pub warmup_fraction: f64,
    pub attention: AttentionConfig,
    pub pseudo: PseudoConfig,
    pub codec: CodecConfig,
}

pub const PATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecFlow {
    /// Gradient reaches the block features through both the target and the encoder.
    Full,
    /// The target is a constant; the encoder input still passes gradient.
    DetachTarget,
    /// Codec parameters only.
    CodecOnly,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            classes: 5,
            widths: [32, 48, 48, 48],
            plain_layers: 2,
            mlp_ratio: 4,
            head_hidden: 64,
            use_pmp: true,
            pooled_descriptor: false,
            prototypes: 64,
            rec_weight: 0.4,
            rec_flow: RecFlow::CodecOnly,
            warmup_fraction: 0.3,
            attention: AttentionConfig::default(),
            pseudo: PseudoConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % (2 * PATCH) != 0 {
            return Err(config_err!("image size must be a positive multiple of {}", 2 * PATCH));
        }
        if self.in_channels == 0 || self.classes < 2 || self.classes > 255 {
            return Err(config_err!("need at least one input channel and 2..=255 classes"));
        }
        if self.widths.contains(&0) || self.mlp_ratio == 0 || self.head_hidden == 0 || self.plain_layers == 0 {
            return Err(config_err!("widths, depth and ratios must be positive"));
        }
        if self.widths[1] != self.widths[2] || self.widths[2] != self.widths[3] {
            return Err(config_err!(
                "perspective blocks share one codec and bank, so their widths must match: {:?}",
                self.widths
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(config_err!("warmup fraction must be in [0, 1]"));
        }
        if !(self.rec_weight >= 0.0 && self.rec_weight.is_finite()) {
            return Err(config_err!("reconstruction weight must be finite and non-negative"));
        }
        if self.prototypes == 0 {
            return Err(config_err!("prototype count must be positive"));
        }
        self.attention.validate()?;
        self.pseudo.validate()?;
        self.codec.validate()?;
        if self.pooled_descriptor && (self.pseudo.mode == PseudoMode::Responsibility || self.pseudo.stochastic_step > 0.0) {
            return Err(config_err!(
                "pooled descriptors only support scalar modulation without the stochastic pull"
            ));
        }
        Ok(())
    }

    /// Side of the plain block grid.
    pub fn grid(&self) -> usize {
        self.image_size / PATCH
    }

    /// Side of the perspective block grid.
    pub fn coarse_grid(&self) -> usize {
        self.grid() / 2
    }

    /// `floor(warmup_fraction * max_iter)`.
    pub fn warmup_iterations(&self, max_iter: usize) -> usize {
        (self.warmup_fraction * max_iter as f64).floor() as usize
    }
}
