use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Residual dense network without its upscaler.
    Rdn,
    /// Plain conv+ReLU stack with a long skip.
    RescnnStyle,
    /// Residual blocks (conv-ReLU-conv + skip) with a long skip.
    SrresnetStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub base_channels: usize,
    /// RDBs for `rdn`, hidden convs for `rescnn_style`, residual blocks for
    /// `srresnet_style`.
    pub num_blocks: usize,
    /// Densely connected convolutions per RDB (`rdn` only).
    pub convs_per_block: usize,
    /// RDB growth rate (`rdn` only).
    pub growth_rate: usize,
    /// Feature channels handed to the decoder.
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Rdn,
            base_channels: 64,
            num_blocks: 8,
            convs_per_block: 3,
            growth_rate: 64,
            out_channels: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of the decoder input: 3 coordinates plus the feature channels.
    pub in_features: usize,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            in_features: 131,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Config with a decoder sized for `feature_channels`.
    pub fn with_channels(encoder: EncoderConfig, hidden: usize) -> Self {
        Self {
            encoder,
            decoder: DecoderConfig {
                in_features: encoder.out_channels + 3,
                hidden,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let positive = [
            ("base_channels", e.base_channels),
            ("num_blocks", e.num_blocks),
            ("out_channels", e.out_channels),
            ("decoder.hidden", self.decoder.hidden),
        ];
        if e.variant == EncoderVariant::Rdn {
            for (name, v) in [("convs_per_block", e.convs_per_block), ("growth_rate", e.growth_rate)] {
                if v == 0 {
                    return Err(Error::Config(format!("{name} must be positive")));
                }
            }
        }
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decoder.in_features != e.out_channels + 3 {
            return Err(Error::Config(format!(
                "decoder expects {} inputs but the encoder yields {} channels (+3 coordinates = {})",
                self.decoder.in_features,
                e.out_channels,
                e.out_channels + 3
            )));
        }
        Ok(())
    }
}
