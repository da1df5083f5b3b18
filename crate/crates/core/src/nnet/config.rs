use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GlassError, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = GlassError;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str().eq_ignore_ascii_case(s))
                    .ok_or_else(|| {
                        let names: Vec<_> = $name::ALL.iter().map(|v| v.as_str()).collect();
                        GlassError::Config(format!(
                            "unknown {} `{s}`; expected one of {}",
                            stringify!($name),
                            names.join(", ")
                        ))
                    })
            }
        }
    };
}

named_enum!(
    /// Encoder backbone.
    BackboneKind {
        Residual18 => "residual-18",
        Residual34 => "residual-34",
        Residual50 => "residual-50",
        Residual101 => "residual-101",
        TinyTest => "tiny-test",
    }
);

named_enum!(
    /// Operation fusing the two encoder streams at the bottleneck.
    FusionKind {
        Mfm => "MFM",
        MfmDs => "MFM-DS",
        MfmDc => "MFM-DC",
        Sfs => "SFS",
        Sfc => "SFC",
        Paf => "PAF",
        At => "AT",
    }
);

named_enum!(
    /// How decoder blocks merge skip features into the running feature.
    DecoderKind {
        Weighted => "weighted",
        Ds => "DS",
        Dc => "DC",
    }
);

named_enum!(
    /// Which images feed the two encoder slots.
    InputKind {
        Rgbt => "rgbt",
        RgbOnly => "rgb-only",
        ThermalOnly => "thermal-only",
        DualRgb => "dual-rgb",
        DualThermal => "dual-thermal",
    }
);

impl InputKind {
    /// Two encoders (and a two-stream fusion bridge) are built.
    pub fn is_two_stream(self) -> bool {
        !matches!(self, InputKind::RgbOnly | InputKind::ThermalOnly)
    }

    pub fn needs_rgb(self) -> bool {
        matches!(self, InputKind::Rgbt | InputKind::RgbOnly | InputKind::DualRgb)
    }

    pub fn needs_thermal(self) -> bool {
        matches!(self, InputKind::Rgbt | InputKind::ThermalOnly | InputKind::DualThermal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_kind: BackboneKind,
    /// Load ImageNet backbone weights from the weight cache.
    pub pretrained: bool,
    /// Width `C` of the fused bridge feature.
    pub channels: usize,
    pub mfm_iterations: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub fusion_kind: FusionKind,
    pub decoder_kind: DecoderKind,
    pub input_kind: InputKind,
    /// Output width of each of the four decoder blocks.
    pub decoder_widths: Vec<usize>,
    /// Stage widths of the tiny-test backbone.
    pub tiny_widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ModelConfig {
    /// Full-size RGB-T model: two ResNet-50 encoders, C = 256, four fusion iterations.
    pub fn canonical() -> Self {
        Self {
            backbone_kind: BackboneKind::Residual50,
            pretrained: true,
            channels: 256,
            mfm_iterations: 4,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
            fusion_kind: FusionKind::Mfm,
            decoder_kind: DecoderKind::Weighted,
            input_kind: InputKind::Rgbt,
            decoder_widths: vec![256; 4],
            tiny_widths: [16, 32, 64, 128],
        }
    }

    /// CPU-sized configuration with the tiny-test backbone.
    pub fn tiny() -> Self {
        Self {
            backbone_kind: BackboneKind::TinyTest,
            pretrained: false,
            channels: 32,
            mfm_iterations: 4,
            heads: 4,
            ffn_dim: 64,
            dropout: 0.0,
            decoder_widths: vec![32; 4],
            ..Self::canonical()
        }
    }

    pub fn with_input(mut self, kind: InputKind) -> Self {
        self.input_kind = kind;
        self
    }

    pub fn with_fusion(mut self, kind: FusionKind) -> Self {
        self.fusion_kind = kind;
        self
    }

    pub fn with_decoder(mut self, kind: DecoderKind) -> Self {
        self.decoder_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GlassError::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return err(format!(
                "model.channels ({}) must be a positive multiple of model.heads ({})",
                self.channels, self.heads
            ));
        }
        if self.channels % 4 != 0 {
            return err(format!(
                "model.channels ({}) must be divisible by 4 for the positional encoding",
                self.channels
            ));
        }
        if self.mfm_iterations == 0 {
            return err("model.mfm_iterations must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return err("model.ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("model.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.decoder_widths.len() != 4 || self.decoder_widths.contains(&0) {
            return err("model.decoder_widths must list four positive widths".into());
        }
        if self.tiny_widths.contains(&0) {
            return err("model.tiny_widths must be positive".into());
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        32
    }

    /// Short identifier used in ablation tables.
    pub fn variant_name(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.input_kind, self.fusion_kind, self.decoder_kind, self.backbone_kind
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in FusionKind::ALL {
            assert_eq!(k.as_str().parse::<FusionKind>().unwrap(), *k);
        }
        assert_eq!("rgb-only".parse::<InputKind>().unwrap(), InputKind::RgbOnly);
        assert!("rgb_only".parse::<InputKind>().is_err());
        let json = serde_json::to_string(&ModelConfig::tiny()).unwrap();
        assert!(json.contains("\"tiny-test\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::tiny());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::canonical().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.mfm_iterations = 0;
        assert!(c.validate().is_err());
    }
}
