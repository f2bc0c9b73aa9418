use alloc::vec::Vec;

use rand::Rng;

use super::ModelError;
use crate::crypto::ImageU8;
use crate::tensor::Tensor;

/// Images with class labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledImages {
    images: Vec<ImageU8>,
    labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Vec<ImageU8>, labels: Vec<usize>) -> Result<Self, ModelError> {
        if images.len() != labels.len() {
            return Err(ModelError::InvalidConfig(alloc::format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageU8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// NCHW float tensor in `[0,1]` for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor, ModelError> {
        images_to_tensor(indices.iter().map(|&i| &self.images[i]))
    }
}

pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a ImageU8>) -> Result<Tensor, ModelError> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = (img.channels(), img.height(), img.width());
        if *dims.get_or_insert(d) != d {
            return Err(ModelError::InvalidConfig("images in a batch must share one shape".into()));
        }
        data.extend(img.to_unit_chw());
        n += 1;
    }
    let (c, h, w) = dims.unwrap_or((0, 0, 0));
    Ok(Tensor::new(alloc::vec![n, c, h, w], data)?)
}

/// Zero-pads by `pad` pixels, takes a random crop of the original size and
/// optionally mirrors horizontally with probability 1/2.
pub fn augment<R: Rng>(img: &ImageU8, pad: usize, flip: bool, rng: &mut R) -> ImageU8 {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let dy = if pad > 0 { rng.random_range(0..=2 * pad) } else { 0 };
    let dx = if pad > 0 { rng.random_range(0..=2 * pad) } else { 0 };
    let mirror = flip && rng.random_bool(0.5);
    let mut out = alloc::vec![0u8; h * w * c];
    for y in 0..h {
        let sy = (y + dy).checked_sub(pad);
        for x in 0..w {
            let xx = if mirror { w - 1 - x } else { x };
            let sx = (xx + dx).checked_sub(pad);
            if let (Some(sy), Some(sx)) = (sy, sx) {
                if sy < h && sx < w {
                    let src = (sy * w + sx) * c;
                    let dst = (y * w + x) * c;
                    out[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
                }
            }
        }
    }
    ImageU8::new(h, w, c, out).expect("same geometry")
}
