use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, TripletAttentionConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockType {
    Plain,
    ResnetBasic,
    ResnetBottleneck,
}

/// One stage: `block_count` blocks producing `channels` outputs, the first
/// of which applies `stride`. Serialized as `[channels, block_count, stride]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize)", into = "(usize, usize, usize)")]
pub struct StageSpec {
    pub channels: usize,
    pub block_count: usize,
    pub stride: usize,
}

impl From<(usize, usize, usize)> for StageSpec {
    fn from((channels, block_count, stride): (usize, usize, usize)) -> Self {
        StageSpec { channels, block_count, stride }
    }
}

impl From<StageSpec> for (usize, usize, usize) {
    fn from(s: StageSpec) -> Self {
        (s.channels, s.block_count, s.stride)
    }
}

pub const BOTTLENECK_EXPANSION: usize = 4;

/// Inputs at least this large get the strided 7×7 + max-pool stem.
pub const LARGE_INPUT_STEM_MIN: usize = 128;

/// Declarative backbone description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub block_type: BlockType,
    pub stage_channels: Vec<StageSpec>,
    pub attention: AttentionSpec,
    pub num_classes: usize,
    /// (C, H, W)
    pub input_shape: [usize; 3],
}

impl ArchSpec {
    /// Canonical ResNet-50 at 224×224 with 1000 classes.
    pub fn resnet50(attention: AttentionSpec) -> Self {
        ArchSpec {
            block_type: BlockType::ResnetBottleneck,
            stage_channels: vec![
                (256, 3, 1).into(),
                (512, 4, 2).into(),
                (1024, 6, 2).into(),
                (2048, 3, 2).into(),
            ],
            attention,
            num_classes: 1000,
            input_shape: [3, 224, 224],
        }
    }

    /// Two plain conv blocks on 3×16×16 inputs.
    pub fn tiny_plain(attention: AttentionSpec, num_classes: usize) -> Self {
        ArchSpec {
            block_type: BlockType::Plain,
            stage_channels: vec![(8, 1, 1).into(), (16, 1, 2).into()],
            attention,
            num_classes,
            input_shape: [3, 16, 16],
        }
    }

    pub fn tiny_triplet(k: usize, num_classes: usize) -> Self {
        Self::tiny_plain(AttentionSpec::Triplet(TripletAttentionConfig::with_k(k)), num_classes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_channels.iter().map(|s| s.block_count).sum()
    }

    pub fn uses_large_stem(&self) -> bool {
        self.block_type != BlockType::Plain
            && self.input_shape[1] >= LARGE_INPUT_STEM_MIN
            && self.input_shape[2] >= LARGE_INPUT_STEM_MIN
    }

    /// Output width of the stem convolution, if the block type has a stem.
    pub fn stem_channels(&self) -> Option<usize> {
        let first = self.stage_channels.first()?.channels;
        match self.block_type {
            BlockType::Plain => None,
            BlockType::ResnetBasic => Some(first),
            BlockType::ResnetBottleneck => Some(first / BOTTLENECK_EXPANSION),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() {
            return cfg("stage_channels is empty".into());
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return cfg(format!("input_shape {:?} has a zero extent", self.input_shape));
        }
        for (i, s) in self.stage_channels.iter().enumerate() {
            if !(1..=2).contains(&s.stride) {
                return cfg(format!("stage {i}: stride {} not in {{1,2}}", s.stride));
            }
            if s.block_count == 0 || s.channels == 0 {
                return cfg(format!("stage {i}: channels and block_count must be positive"));
            }
            if self.block_type == BlockType::ResnetBottleneck && s.channels % BOTTLENECK_EXPANSION != 0 {
                return cfg(format!(
                    "stage {i}: bottleneck output channels {} not divisible by expansion {BOTTLENECK_EXPANSION}",
                    s.channels
                ));
            }
        }
        match self.attention {
            AttentionSpec::Se { reduction } | AttentionSpec::Cbam { reduction, .. } => {
                if let Some(s) = self.stage_channels.iter().find(|s| reduction == 0 || s.channels % reduction != 0) {
                    return cfg(format!("reduction {reduction} does not divide stage width {}", s.channels));
                }
            }
            AttentionSpec::Triplet(t) => t.validate()?,
            AttentionSpec::None => {}
        }
        if let AttentionSpec::Cbam { k, .. } = self.attention {
            if k % 2 == 0 {
                return cfg(format!("cbam kernel must be odd, got {k}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let spec = ArchSpec::resnet50(AttentionSpec::Triplet(TripletAttentionConfig::default()));
        let text = spec.to_json();
        assert_eq!(ArchSpec::from_json(&text).unwrap(), spec);
        let text = r#"{"block_type":"plain","stage_channels":[[8,1,1]],"attention":{"type":"none"},
                       "num_classes":2,"input_shape":[3,8,8]}"#;
        assert!(ArchSpec::from_json(text).is_ok());
        let extra = text.replace("\"num_classes\"", "\"depth\":3,\"num_classes\"");
        assert!(ArchSpec::from_json(&extra).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = ArchSpec::tiny_plain(AttentionSpec::None, 2);
        s.stage_channels[0].stride = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = ArchSpec::resnet50(AttentionSpec::None);
        s.stage_channels[1].channels = 510;
        assert!(s.validate().is_err());
        let s = ArchSpec::tiny_plain(AttentionSpec::Se { reduction: 3 }, 2);
        assert!(s.validate().is_err());
    }

    #[test]
    fn resnet50_shape() {
        let s = ArchSpec::resnet50(AttentionSpec::None);
        assert_eq!(s.total_blocks(), 16);
        assert!(s.uses_large_stem());
        assert_eq!(s.stem_channels(), Some(64));
    }
}
