//! Keyed block-wise image transforms: pixel shuffling (SHF), negative-positive
//! flipping (NP) and a Feistel format-preserving cipher over 8-bit values (FFX).
//!
//! An image is cut into `M x M` blocks and every block goes through the same
//! key-derived tables, so the transform only depends on the position inside a
//! block.

mod blocks;
pub(crate) mod image;
mod key;
mod prf;
mod tables;

pub use blocks::{merge_blocks, partition_blocks, Blocks};
pub use image::ImageU8;
pub use key::{EncryptionKey, Transform};
pub use prf::{Prf, PrfStream};
pub use tables::{derive_tables, feistel_encrypt_byte, TransformTables, FEISTEL_ROUNDS};

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("block size must be at least 1")]
    ZeroBlockSize,
    #[error("block size {block} does not divide a {height}x{width} image")]
    NotDivisible {
        block: usize,
        height: usize,
        width: usize,
    },
    #[error("image data has {got} bytes, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("channel count must be at least 1")]
    NoChannels,
    #[error("tables were derived for {tables} channels, image has {image}")]
    ChannelMismatch { tables: usize, image: usize },
    #[error("unknown transform `{0}`")]
    UnknownTransform(alloc::string::String),
    #[error("gradient is unavailable through the FFX transform")]
    GradientUnavailable,
}

/// A key together with its derived tables for a fixed channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Cipher {
    key: EncryptionKey,
    channels: usize,
    tables: TransformTables,
}

impl Cipher {
    pub fn new(key: EncryptionKey, channels: usize) -> Result<Self, CryptoError> {
        let tables = derive_tables(&key, channels)?;
        Ok(Cipher { key, channels, tables })
    }

    pub fn key(&self) -> &EncryptionKey {
        &self.key
    }

    pub fn tables(&self) -> &TransformTables {
        &self.tables
    }

    fn check(&self, img: &ImageU8) -> Result<(), CryptoError> {
        if img.channels() != self.channels {
            return Err(CryptoError::ChannelMismatch {
                tables: self.channels,
                image: img.channels(),
            });
        }
        Ok(())
    }

    pub fn encrypt(&self, img: &ImageU8) -> Result<ImageU8, CryptoError> {
        self.check(img)?;
        let mut blocks = partition_blocks(img, self.key.block_size)?;
        for block in blocks.iter_mut() {
            self.tables.encrypt_block(block);
        }
        merge_blocks(&blocks)
    }

    pub fn decrypt(&self, img: &ImageU8) -> Result<ImageU8, CryptoError> {
        self.check(img)?;
        let mut blocks = partition_blocks(img, self.key.block_size)?;
        for block in blocks.iter_mut() {
            self.tables.decrypt_block(block);
        }
        merge_blocks(&blocks)
    }

    /// Pulls a gradient taken with respect to the encrypted image (HWC, in the
    /// `[0,1]` scale) back to the plain image, treating quantization as the
    /// identity. SHF routes each entry to its source position and NP negates
    /// flipped positions; FFX is not differentiable.
    pub fn pullback(&self, height: usize, width: usize, grad: &[f32]) -> Result<Vec<f32>, CryptoError> {
        let m = self.key.block_size;
        let c = self.channels;
        check_geometry(height, width, m)?;
        let expected = height * width * c;
        if grad.len() != expected {
            return Err(CryptoError::DataLength {
                expected,
                got: grad.len(),
            });
        }
        let mut out = vec![0.0f32; expected];
        let offset = |by: usize, bx: usize, i: usize| {
            let (y, rest) = (i / (m * c), i % (m * c));
            let (x, ch) = (rest / c, rest % c);
            ((by * m + y) * width + bx * m + x) * c + ch
        };
        match &self.tables {
            TransformTables::Shf { perm, .. } => {
                for by in 0..height / m {
                    for bx in 0..width / m {
                        for (i, &src) in perm.iter().enumerate() {
                            out[offset(by, bx, src as usize)] += grad[offset(by, bx, i)];
                        }
                    }
                }
            }
            TransformTables::Np { flips } => {
                for by in 0..height / m {
                    for bx in 0..width / m {
                        for (i, &f) in flips.iter().enumerate() {
                            let o = offset(by, bx, i);
                            out[o] = if f == 1 { -grad[o] } else { grad[o] };
                        }
                    }
                }
            }
            TransformTables::Ffx { .. } => return Err(CryptoError::GradientUnavailable),
        }
        Ok(out)
    }
}

pub(crate) fn check_geometry(height: usize, width: usize, block: usize) -> Result<(), CryptoError> {
    if block == 0 {
        return Err(CryptoError::ZeroBlockSize);
    }
    if height % block != 0 || width % block != 0 {
        return Err(CryptoError::NotDivisible { block, height, width });
    }
    Ok(())
}

pub fn encrypt_image(img: &ImageU8, key: &EncryptionKey) -> Result<ImageU8, CryptoError> {
    Cipher::new(*key, img.channels())?.encrypt(img)
}

pub fn decrypt_image(img: &ImageU8, key: &EncryptionKey) -> Result<ImageU8, CryptoError> {
    Cipher::new(*key, img.channels())?.decrypt(img)
}

#[cfg(test)]
mod tests;
