use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sobel::{AttentionMode, SobelCombine};

/// How left-atrium decoder features reach the scar decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Gate by the Sobel boundary response of the LA features.
    #[default]
    Sobel,
    /// Gate by the raw LA features.
    Multiply,
    /// Plain skip connections; branches are independent.
    None,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(FusionMode::Sobel),
            "multiply" => Ok(FusionMode::Multiply),
            "none" => Ok(FusionMode::None),
            other => Err(Error::InvalidConfig(format!("fusion_mode: unknown value '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of resolution levels in each encoder.
    pub encoder_depth: usize,
    /// Number of sub-decoders per branch; sub-decoder `n` starts at level `n`.
    pub sub_decoders: usize,
    /// Channels at level 0; doubled at each deeper level.
    pub base_channels: usize,
    pub fusion_mode: FusionMode,
    pub attention_mode: AttentionMode,
    pub sobel_combine: SobelCombine,
    /// Build the left-atrium branch.
    pub la_branch: bool,
    /// Let the LA branch reuse the scar encoder instead of owning one.
    pub share_encoder: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            encoder_depth: 3,
            sub_decoders: 2,
            base_channels: 8,
            fusion_mode: FusionMode::Sobel,
            attention_mode: AttentionMode::Sigmoid,
            sobel_combine: SobelCombine::Magnitude,
            la_branch: true,
            share_encoder: false,
        }
    }

    pub fn full_scale() -> Self {
        NetworkConfig {
            encoder_depth: 5,
            sub_decoders: 4,
            base_channels: 16,
            ..Self::desk()
        }
    }

    /// Scar branch only, plain skips.
    pub fn mdnet(mut self) -> Self {
        self.fusion_mode = FusionMode::None;
        self.la_branch = false;
        self.share_encoder = false;
        self
    }

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        if mode == FusionMode::None {
            self.la_branch = false;
            self.share_encoder = false;
        } else {
            self.la_branch = true;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.encoder_depth < 2 {
            return bad("encoder_depth: must be >= 2");
        }
        if self.sub_decoders < 1 || self.sub_decoders > self.encoder_depth - 1 {
            return bad("sub_decoders: must be in 1..=encoder_depth-1");
        }
        if self.base_channels < 1 {
            return bad("base_channels: must be >= 1");
        }
        if self.fusion_mode != FusionMode::None && !self.la_branch {
            return bad("fusion_mode: sobel/multiply fusion requires la_branch = true");
        }
        if self.share_encoder && !self.la_branch {
            return bad("share_encoder: requires la_branch = true");
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dimensions must be multiples of this.
    pub fn grid_divisor(&self) -> usize {
        1 << (self.encoder_depth - 1)
    }

    /// Method label used in reports.
    pub fn method_name(&self) -> &'static str {
        match (self.fusion_mode, self.la_branch) {
            (FusionMode::Sobel, _) => "MDBAnet",
            (FusionMode::Multiply, _) => "MDBAnet_mul",
            (FusionMode::None, false) => "MDnet",
            (FusionMode::None, true) => "MDnet+LA",
        }
    }
}
