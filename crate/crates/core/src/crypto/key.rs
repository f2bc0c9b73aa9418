use core::fmt;
use core::str::FromStr;

use super::CryptoError;

/// Block transform family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    /// Keyed permutation of the values inside a block.
    Shf,
    /// Keyed negative-positive flip `v -> 255 - v`.
    Np,
    /// Keyed Feistel bijection on each 8-bit value, tweaked by block position.
    Ffx,
}

impl Transform {
    pub const ALL: [Transform; 3] = [Transform::Shf, Transform::Np, Transform::Ffx];

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Shf => "SHF",
            Transform::Np => "NP",
            Transform::Ffx => "FFX",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Transform::Shf => 1,
            Transform::Np => 2,
            Transform::Ffx => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Transform::Shf),
            2 => Some(Transform::Np),
            3 => Some(Transform::Ffx),
            _ => None,
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SHF" => Ok(Transform::Shf),
            "NP" => Ok(Transform::Np),
            "FFX" => Ok(Transform::Ffx),
            _ => Err(CryptoError::UnknownTransform(s.into())),
        }
    }
}

/// Secret key material plus the transform and block size it drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncryptionKey {
    pub seed: u128,
    pub transform: Transform,
    pub block_size: usize,
}

impl EncryptionKey {
    pub fn new(seed: u128, transform: Transform, block_size: usize) -> Result<Self, CryptoError> {
        if block_size == 0 {
            return Err(CryptoError::ZeroBlockSize);
        }
        Ok(EncryptionKey {
            seed,
            transform,
            block_size,
        })
    }

    pub fn seed_bytes(&self) -> [u8; 16] {
        self.seed.to_be_bytes()
    }
}
