use alloc::vec;
use alloc::vec::Vec;

use super::{check_geometry, CryptoError, ImageU8};

/// An image cut into `M x M` blocks in raster order. Each block holds
/// `M * M * C` values, row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocks {
    height: usize,
    width: usize,
    channels: usize,
    block_size: usize,
    blocks: Vec<Vec<u8>>,
}

impl Blocks {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn get(&self, i: usize) -> Option<&[u8]> {
        self.blocks.get(i).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.blocks.iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut [u8]> {
        self.blocks.iter_mut().map(Vec::as_mut_slice)
    }
}

pub fn partition_blocks(img: &ImageU8, block_size: usize) -> Result<Blocks, CryptoError> {
    let (h, w, c, m) = (img.height(), img.width(), img.channels(), block_size);
    check_geometry(h, w, m)?;
    let row = m * c;
    let mut blocks = Vec::with_capacity((h / m) * (w / m));
    for by in 0..h / m {
        for bx in 0..w / m {
            let mut block = Vec::with_capacity(m * row);
            for y in 0..m {
                let start = ((by * m + y) * w + bx * m) * c;
                block.extend_from_slice(&img.data()[start..start + row]);
            }
            blocks.push(block);
        }
    }
    Ok(Blocks {
        height: h,
        width: w,
        channels: c,
        block_size: m,
        blocks,
    })
}

pub fn merge_blocks(blocks: &Blocks) -> Result<ImageU8, CryptoError> {
    let (h, w, c, m) = (blocks.height, blocks.width, blocks.channels, blocks.block_size);
    let row = m * c;
    let mut data = vec![0u8; h * w * c];
    let per_row = w / m;
    for (i, block) in blocks.blocks.iter().enumerate() {
        let (by, bx) = (i / per_row, i % per_row);
        for y in 0..m {
            let start = ((by * m + y) * w + bx * m) * c;
            data[start..start + row].copy_from_slice(&block[y * row..(y + 1) * row]);
        }
    }
    ImageU8::new(h, w, c, data)
}
