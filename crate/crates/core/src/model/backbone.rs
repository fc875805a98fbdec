use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual convolutional backbones with a stride-4 stem and four stages.
///
/// Stage `l` (1-based) outputs features at stride `2^(l+1)`: 4, 8, 16, 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "resnet-tiny")]
    ResnetTiny,
    #[serde(rename = "resnet-small")]
    ResnetSmall,
}

impl BackboneId {
    pub const NUM_STAGES: usize = 4;
    pub const MAX_STRIDE: usize = 32;

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::ResnetTiny => "resnet-tiny",
            BackboneId::ResnetSmall => "resnet-small",
        }
    }

    pub(crate) fn stem_channels(&self) -> [usize; 2] {
        match self {
            BackboneId::ResnetTiny => [8, 16],
            BackboneId::ResnetSmall => [16, 32],
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        match self {
            BackboneId::ResnetTiny => [16, 32, 48, 64],
            BackboneId::ResnetSmall => [32, 64, 96, 128],
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.stage_channels()[stage - 1]
    }

    pub fn stride(stage: usize) -> usize {
        1 << (stage + 1)
    }

    pub(crate) fn stage_conv_stride(stage: usize) -> usize {
        if stage == 1 {
            1
        } else {
            2
        }
    }

    /// `(name, shape)` for every parameter, in a fixed order.
    pub(crate) fn parameter_shapes(&self, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let [s0, s1] = self.stem_channels();
        out.push(("stem.0.weight".into(), vec![s0, 3, 3, 3]));
        out.push(("stem.0.bias".into(), vec![s0]));
        out.push(("stem.1.weight".into(), vec![s1, s0, 3, 3]));
        out.push(("stem.1.bias".into(), vec![s1]));
        let mut in_c = s1;
        for stage in 1..=Self::NUM_STAGES {
            let c = self.channels(stage);
            out.push((format!("stage{stage}.conv1.weight"), vec![c, in_c, 3, 3]));
            out.push((format!("stage{stage}.conv1.bias"), vec![c]));
            out.push((format!("stage{stage}.conv2.weight"), vec![c, c, 3, 3]));
            out.push((format!("stage{stage}.conv2.bias"), vec![c]));
            if in_c != c || Self::stage_conv_stride(stage) != 1 {
                out.push((format!("stage{stage}.proj.weight"), vec![c, in_c, 1, 1]));
                out.push((format!("stage{stage}.proj.bias"), vec![c]));
            }
            in_c = c;
        }
        out.push(("head.weight".into(), vec![num_classes, in_c]));
        out.push(("head.bias".into(), vec![num_classes]));
        out
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet-tiny" => Ok(BackboneId::ResnetTiny),
            "resnet-small" => Ok(BackboneId::ResnetSmall),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}
