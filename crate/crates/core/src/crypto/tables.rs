use alloc::vec;
use alloc::vec::Vec;

use super::{CryptoError, EncryptionKey, Prf, Transform};

pub const FEISTEL_ROUNDS: usize = 8;

const TAG_SHF: &[u8] = b"block-shuffle";
const TAG_NP: &[u8] = b"block-flip";
const TAG_FFX: &[u8] = b"block-feistel";

/// Key-derived tables shared by every block of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformTables {
    /// `out[i] = in[perm[i]]` inside a block; `inverse` undoes it.
    Shf { perm: Vec<u32>, inverse: Vec<u32> },
    /// `out[i] = 255 - in[i]` where `flips[i] == 1`.
    Np { flips: Vec<u8> },
    /// One bijection on `0..=255` per position inside a block.
    Ffx {
        forward: Vec<[u8; 256]>,
        inverse: Vec<[u8; 256]>,
    },
}

impl TransformTables {
    /// Number of positions inside a block (`M * M * C`).
    pub fn positions(&self) -> usize {
        match self {
            TransformTables::Shf { perm, .. } => perm.len(),
            TransformTables::Np { flips } => flips.len(),
            TransformTables::Ffx { forward, .. } => forward.len(),
        }
    }

    pub fn encrypt_block(&self, block: &mut [u8]) {
        match self {
            TransformTables::Shf { perm, .. } => {
                let src = block.to_vec();
                for (o, &p) in block.iter_mut().zip(perm) {
                    *o = src[p as usize];
                }
            }
            TransformTables::Np { flips } => flip(block, flips),
            TransformTables::Ffx { forward, .. } => {
                for (v, table) in block.iter_mut().zip(forward) {
                    *v = table[*v as usize];
                }
            }
        }
    }

    pub fn decrypt_block(&self, block: &mut [u8]) {
        match self {
            TransformTables::Shf { inverse, .. } => {
                let src = block.to_vec();
                for (o, &p) in block.iter_mut().zip(inverse) {
                    *o = src[p as usize];
                }
            }
            TransformTables::Np { flips } => flip(block, flips),
            TransformTables::Ffx { inverse, .. } => {
                for (v, table) in block.iter_mut().zip(inverse) {
                    *v = table[*v as usize];
                }
            }
        }
    }
}

fn flip(block: &mut [u8], flips: &[u8]) {
    for (v, &f) in block.iter_mut().zip(flips) {
        if f == 1 {
            *v = 255 - *v;
        }
    }
}

/// Round function outputs for one position: `rounds[r][x]` is the 4-bit value
/// mixed into the left half when the right half equals `x` in round `r`.
fn round_tables(prf: &Prf, position: u64) -> [[u8; 16]; FEISTEL_ROUNDS] {
    let mut out = [[0u8; 16]; FEISTEL_ROUNDS];
    for (r, row) in out.iter_mut().enumerate() {
        let block = prf.block(TAG_FFX, position * FEISTEL_ROUNDS as u64 + r as u64);
        for (x, v) in row.iter_mut().enumerate() {
            *v = block[x] & 0x0f;
        }
    }
    out
}

/// Runs the balanced 4+4-bit Feistel network on one byte.
pub fn feistel_encrypt_byte(rounds: &[[u8; 16]; FEISTEL_ROUNDS], v: u8) -> u8 {
    let (mut left, mut right) = (v >> 4, v & 0x0f);
    for row in rounds {
        let next = left ^ row[right as usize];
        left = right;
        right = next;
    }
    (left << 4) | right
}

pub fn derive_tables(key: &EncryptionKey, channels: usize) -> Result<TransformTables, CryptoError> {
    if channels == 0 {
        return Err(CryptoError::NoChannels);
    }
    if key.block_size == 0 {
        return Err(CryptoError::ZeroBlockSize);
    }
    let n = key.block_size * key.block_size * channels;
    let prf = Prf::new(key.seed_bytes());
    Ok(match key.transform {
        Transform::Shf => {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            let mut stream = prf.stream(TAG_SHF);
            for i in (1..n).rev() {
                let j = stream.below(i as u64 + 1) as usize;
                perm.swap(i, j);
            }
            let mut inverse = vec![0u32; n];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p as usize] = i as u32;
            }
            TransformTables::Shf { perm, inverse }
        }
        Transform::Np => {
            let mut stream = prf.stream(TAG_NP);
            let mut flips = Vec::with_capacity(n);
            while flips.len() < n {
                let word = stream.next_u64();
                for bit in 0..64 {
                    if flips.len() == n {
                        break;
                    }
                    flips.push(((word >> bit) & 1) as u8);
                }
            }
            TransformTables::Np { flips }
        }
        Transform::Ffx => {
            let mut forward = Vec::with_capacity(n);
            let mut inverse = Vec::with_capacity(n);
            for p in 0..n {
                let rounds = round_tables(&prf, p as u64);
                let mut fwd = [0u8; 256];
                let mut inv = [0u8; 256];
                for v in 0..=255u8 {
                    let e = feistel_encrypt_byte(&rounds, v);
                    fwd[v as usize] = e;
                    inv[e as usize] = v;
                }
                forward.push(fwd);
                inverse.push(inv);
            }
            TransformTables::Ffx { forward, inverse }
        }
    })
}
