use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::ModelError;

/// The closed set of desk-scale architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    /// Four 3x3 conv blocks.
    CnnSmall,
    /// Eight 3x3 conv blocks (two per stage).
    CnnDeep,
    /// Patch-4 vision transformer, width 96, 4 heads, 4 layers.
    VitTiny,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::CnnSmall, Architecture::CnnDeep, Architecture::VitTiny];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::CnnSmall => "cnn_small",
            Architecture::CnnDeep => "cnn_deep",
            Architecture::VitTiny => "vit_tiny",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Architecture::CnnSmall => 1,
            Architecture::CnnDeep => 2,
            Architecture::VitTiny => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.code() == code)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.into()))
    }
}

/// Architecture plus the fixed input/output geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        ModelSpec {
            architecture,
            num_classes: 10,
            channels: 3,
            height: 32,
            width: 32,
        }
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn network(&self) -> NetworkDef {
        let base = |stages: Vec<Vec<usize>>| NetworkDef::Cnn {
            channels: self.channels,
            height: self.height,
            width: self.width,
            stages,
            classes: self.num_classes,
        };
        match self.architecture {
            Architecture::CnnSmall => base(vec![vec![16], vec![32], vec![64], vec![64]]),
            Architecture::CnnDeep => base(vec![vec![16, 16], vec![32, 32], vec![64, 64], vec![128, 128]]),
            Architecture::VitTiny => NetworkDef::Vit {
                channels: self.channels,
                height: self.height,
                width: self.width,
                patch: 4,
                dim: 96,
                heads: 4,
                layers: 4,
                mlp: 192,
                classes: self.num_classes,
            },
        }
    }
}

/// Layer-level description of a network family; [`ModelSpec`] pins the sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkDef {
    /// 3x3 conv + ReLU blocks grouped in stages, 2x2 max-pool between stages,
    /// global average pool and a linear head.
    Cnn {
        channels: usize,
        height: usize,
        width: usize,
        stages: Vec<Vec<usize>>,
        classes: usize,
    },
    /// Patch embedding, learned position embedding, pre-norm transformer
    /// blocks with ReLU MLPs, mean-token pooling and a linear head.
    Vit {
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        mlp: usize,
        classes: usize,
    },
}
