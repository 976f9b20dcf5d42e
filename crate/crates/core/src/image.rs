//! RGB images stored as planar `f32` in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{PrismError, Result};

/// Planar RGB image, channel-major (`[3, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PrismError::Shape("image must be non-empty".into()));
        }
        if data.len() != 3 * height * width {
            return Err(PrismError::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PrismError::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.height + y) * self.width + x] = v;
    }

    /// Rejects sizes the 1/32 attention pyramid cannot tile.
    pub fn check_divisible(&self, by: usize) -> Result<()> {
        if self.height % by != 0 || self.width % by != 0 {
            return Err(PrismError::Shape(format!(
                "image size {}x{} is not divisible by {by}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Luma replicated over three channels.
    pub fn to_grayscale(&self) -> Self {
        let n = self.height * self.width;
        let mut out = self.clone();
        for i in 0..n {
            let g = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            out.data[i] = g;
            out.data[n + i] = g;
            out.data[2 * n + i] = g;
        }
        out
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `k + 0.5`).
    /// Returns `None` outside the image.
    pub fn sample_bilinear(&self, channel: usize, x: f64, y: f64) -> Option<f32> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && x <= w && y >= 0.0 && y <= h) {
            return None;
        }
        let fx = (x - 0.5).clamp(0.0, w - 1.0);
        let fy = (y - 0.5).clamp(0.0, h - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let top = self.get(channel, y0, x0) * (1.0 - ax) + self.get(channel, y0, x1) * ax;
        let bot = self.get(channel, y1, x0) * (1.0 - ax) + self.get(channel, y1, x1) * ax;
        Some(top * (1.0 - ay) + bot * ay)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }

    /// Resamples to a new size with bilinear interpolation.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(height, width);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = self
                        .sample_bilinear(c, (x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy)
                        .unwrap_or(0.0);
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}

/// Writes a single-channel 8-bit image.
pub fn save_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| PrismError::Shape("grayscale buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let mut img = ImageTensor::zeros(4, 4);
        img.set(0, 1, 2, 0.75);
        assert_eq!(img.sample_bilinear(0, 2.5, 1.5), Some(0.75));
        assert_eq!(img.sample_bilinear(0, 3.0, 1.5), Some(0.375));
        assert_eq!(img.sample_bilinear(0, -0.1, 1.5), None);
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(ImageTensor::zeros(64, 64).check_divisible(32).is_ok());
        assert!(ImageTensor::zeros(64, 48).check_divisible(32).is_err());
    }
}
