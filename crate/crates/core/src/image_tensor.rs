//! Plain CHW image buffers in the generator's value range and conversions to
//! and from 8-bit rasters and candle tensors.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{invalid, Result};

/// A 3×H×W image normalized to [-1, 1], stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(invalid(format!(
                "image buffer has {} values, expected 3×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// v' = v / 127.5 - 1 per channel.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Inverse of [`ImageTensor::from_rgb8`]: v' = round((v + 1) · 127.5), saturated to 8 bits.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = encode_unit(self.get(c, y as usize, x as usize));
            }
            image::Rgb(px)
        })
    }

    /// Batched tensor of shape (1, 3, H, W).
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads one image out of a (N, 3, H, W) or (3, H, W) tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let t = if t.rank() == 3 { t.unsqueeze(0)? } else { t.clone() };
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(invalid(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .get(index)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }
}

/// Stacks images of identical size into a (N, 3, H, W) tensor.
pub fn stack_images(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid("cannot stack an empty image list"))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.size() != (h, w) {
            return Err(invalid(format!(
                "image size {:?} differs from batch size {:?}",
                img.size(),
                (h, w)
            )));
        }
        data.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Maps a value in [-1, 1] to an 8-bit level.
pub fn encode_unit(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Maps a weight in [0, 1] linearly to an 8-bit gray level.
pub fn encode_weight(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 50) as u8, (y * 90) as u8, 7]));
        let t = ImageTensor::from_rgb8(&img);
        assert_eq!(t.to_rgb8(), img);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageTensor::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let t = img.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        assert_eq!(ImageTensor::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(ImageTensor::new(2, 2, vec![0.0; 11]).is_err());
    }
}
