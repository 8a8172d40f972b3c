use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time between feature frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FramePeriod {
    #[serde(rename = "10ms")]
    Ms10,
    #[serde(rename = "20ms")]
    Ms20,
}

impl FramePeriod {
    pub fn from_millis(ms: u32) -> Result<Self> {
        match ms {
            10 => Ok(Self::Ms10),
            20 => Ok(Self::Ms20),
            other => Err(Error::config(format!("frame period must be 10 or 20 ms, got {other}"))),
        }
    }

    pub fn millis(self) -> u32 {
        match self {
            Self::Ms10 => 10,
            Self::Ms20 => 20,
        }
    }

    pub fn frames_per_second(self) -> usize {
        1000 / self.millis() as usize
    }

    pub fn seconds(self) -> f64 {
        self.millis() as f64 / 1000.0
    }
}

/// Span masking: every frame starts a masked span with probability
/// `mask_prob`; spans cover `span_len` frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingSpec {
    pub mask_prob: f64,
    pub span_len: usize,
}

impl MaskingSpec {
    /// 7% / 10 frames at 10 ms, 14% / 5 frames at 20 ms; both cover
    /// about the same duration of speech.
    pub fn for_period(period: FramePeriod) -> Self {
        match period {
            FramePeriod::Ms10 => Self {
                mask_prob: 0.07,
                span_len: 10,
            },
            FramePeriod::Ms20 => Self {
                mask_prob: 0.14,
                span_len: 5,
            },
        }
    }

    /// Probability that a frame far from the edges is covered.
    pub fn expected_coverage(&self) -> f64 {
        1.0 - (1.0 - self.mask_prob).powi(self.span_len as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::config(format!("mask probability {} not in (0, 1)", self.mask_prob)));
        }
        if self.span_len == 0 {
            return Err(Error::config("mask span must cover at least one frame"));
        }
        Ok(())
    }
}

/// Residual block layout. Only pre-LN is implemented; the field exists so
/// emitted configs state the choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    PreLn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluTanh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    /// Cluster vocabulary of the masked-prediction targets.
    pub clusters: usize,
    pub dropout: f64,
    pub masking: MaskingSpec,
    pub frame_period: FramePeriod,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub positional: Positional,
}

impl Default for EncoderConfig {
    /// Desk-scale geometry: 12 layers, d = 96, 4 heads, f = 4d, 32 clusters.
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 96,
            heads: 4,
            ffn_dim: 384,
            input_dim: 40,
            clusters: 32,
            dropout: 0.1,
            masking: MaskingSpec::for_period(FramePeriod::Ms10),
            frame_period: FramePeriod::Ms10,
            norm: NormPlacement::PreLn,
            activation: Activation::GeluTanh,
            positional: Positional::Sinusoidal,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of head count {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("FFN dim must be at least 1"));
        }
        if self.clusters < 2 {
            return Err(Error::config("cluster vocabulary needs at least 2 entries"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.masking.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_defaults_cover_similar_fractions() {
        let a = MaskingSpec::for_period(FramePeriod::Ms10).expected_coverage();
        let b = MaskingSpec::for_period(FramePeriod::Ms20).expected_coverage();
        assert!((a - 0.516).abs() < 1e-3, "{a}");
        // Each covers roughly 0.5 s of a 1 s window at its own frame rate.
        assert!((a - b).abs() < 0.06, "{a} vs {b}");
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(FramePeriod::from_millis(15).is_err());
        assert_eq!(FramePeriod::Ms20.frames_per_second(), 50);
    }

    #[test]
    fn config_json_roundtrip_records_architecture() {
        let cfg = EncoderConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("pre_ln") && json.contains("sinusoidal") && json.contains("10ms"));
        let back: EncoderConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
