use alloc::vec::Vec;

use super::CryptoError;

/// An 8-bit image stored row-major as height x width x channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self, CryptoError> {
        if channels == 0 {
            return Err(CryptoError::NoChannels);
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(CryptoError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(ImageU8 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Quantizes a CHW float image in `[0,1]`: `round(clamp(v, 0, 1) * 255)`.
    pub fn from_unit_chw(channels: usize, height: usize, width: usize, chw: &[f32]) -> Result<Self, CryptoError> {
        let plane = height * width;
        if chw.len() != channels * plane {
            return Err(CryptoError::DataLength {
                expected: channels * plane,
                got: chw.len(),
            });
        }
        let mut data = alloc::vec![0u8; chw.len()];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = quantize(chw[c * plane + p]);
            }
        }
        ImageU8::new(height, width, channels, data)
    }

    /// Rescales to a CHW float image in `[0,1]`.
    pub fn to_unit_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = alloc::vec![0.0f32; self.data.len()];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = self.data[p * self.channels + c] as f32 / 255.0;
            }
        }
        out
    }
}

/// `round(clamp(v, 0, 1) * 255)`; NaN maps to 0.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    libm::roundf(v * 255.0) as u8
}
