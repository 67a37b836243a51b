use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How pyramid levels are combined before the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffMode {
    /// Plain channel concatenation.
    Off,
    /// Attention-weighted spatial pooling to one vector per channel. Available
    /// on the fusion block itself; it removes the spatial grid, so the
    /// detection model does not accept it.
    LiteralPool,
    /// Each level multiplied by its own attention map, then concatenated.
    ElementwiseGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem_channels: usize,
    /// Output channels of the four stride-2 stages (strides 4, 8, 16, 32).
    pub stage_channels: [usize; 4],
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub classes: usize,
    pub fgpa_enabled: bool,
    pub aff_mode: AffMode,
    /// Attention-map kernel size (odd, "same" padding).
    pub aff_kernel: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            decoder_layers: 2,
            queries: 30,
            classes: 7,
            fgpa_enabled: true,
            aff_mode: AffMode::ElementwiseGate,
            aff_kernel: 3,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return fail(format!(
                "hidden_dim {} must be divisible by 4 for the 2-D positional encoding",
                self.hidden_dim
            ));
        }
        if self.decoder_layers == 0 || self.queries == 0 || self.classes == 0 || self.ffn_dim == 0 {
            return fail("decoder_layers, queries, classes and ffn_dim must be >= 1".into());
        }
        if self.aff_kernel % 2 == 0 {
            return fail(format!("aff_kernel {} must be odd", self.aff_kernel));
        }
        if self.aff_mode == AffMode::LiteralPool {
            return fail(
                "aff_mode literal_pool pools away the spatial grid and cannot feed the decoder; \
                 use elementwise_gate or off"
                    .into(),
            );
        }
        Ok(())
    }
}
