use std::path::Path;

use candle_core::{Device, Tensor};
use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// A square single-channel glyph, background 1.0 and ink 0.0.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pub size: usize,
    /// Row-major pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub codepoint: u32,
    pub font_id: String,
}

impl GlyphImage {
    pub fn new(size: usize, pixels: Vec<f32>, codepoint: u32, font_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::shape((size, size), pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::DimensionMismatch(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            size,
            pixels,
            codepoint,
            font_id: font_id.into(),
        })
    }

    pub fn blank(size: usize, codepoint: u32, font_id: impl Into<String>) -> Self {
        Self {
            size,
            pixels: vec![1.0; size * size],
            codepoint,
            font_id: font_id.into(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (1, 1, self.size, self.size), device)?)
    }

    /// Builds an image from a `H x W`, `1 x H x W` or `1 x 1 x H x W` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, codepoint: u32, font_id: impl Into<String>) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape("[1, 1, H, W]", dims)),
        };
        if h != w {
            return Err(Error::shape((h, h), (h, w)));
        }
        let pixels = t
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|p| if p.is_nan() { 1.0 } else { p.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            size: h,
            pixels,
            codepoint,
            font_id: font_id.into(),
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        let size = self.size as u32;
        GrayImage::from_fn(size, size, |x, y| {
            let p = self.pixels[y as usize * self.size + x as usize];
            Luma([(p * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn from_gray(img: &GrayImage, codepoint: u32, font_id: impl Into<String>) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::shape((img.width(), img.width()), (img.height(), img.width())));
        }
        let pixels = img.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        Ok(Self {
            size: img.width() as usize,
            pixels,
            codepoint,
            font_id: font_id.into(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path, codepoint: u32, font_id: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::UnreadableSource {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_gray(&img.to_luma8(), codepoint, font_id)
    }

    /// Nearest-neighbour resample to `size x size`.
    pub fn resized(&self, size: usize) -> Self {
        if size == self.size {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let sr = (r * self.size) / size;
                let sc = (c * self.size) / size;
                pixels.push(self.get(sr, sc));
            }
        }
        Self {
            size,
            pixels,
            codepoint: self.codepoint,
            font_id: self.font_id.clone(),
        }
    }
}

/// Stacks glyphs into an `N x 1 x H x W` batch.
pub fn batch_tensor(glyphs: &[&GlyphImage], device: &Device) -> Result<Tensor> {
    let first = glyphs.first().ok_or(Error::EmptyDataset)?;
    let size = first.size;
    let mut data = Vec::with_capacity(glyphs.len() * size * size);
    for g in glyphs {
        if g.size != size {
            return Err(Error::shape((size, size), (g.size, g.size)));
        }
        data.extend_from_slice(&g.pixels);
    }
    Ok(Tensor::from_vec(data, (glyphs.len(), 1, size, size), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f32> = (0..16).map(|i| i as f32 * 17.0 / 255.0).collect();
        let g = GlyphImage::new(4, pixels.clone(), 0x4E00, "f").unwrap();
        let path = dir.path().join("g.png");
        g.save_png(&path).unwrap();
        let back = GlyphImage::load_png(&path, 0x4E00, "f").unwrap();
        for (a, b) in pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GlyphImage::new(1, vec![1.5], 0, "f").is_err());
        assert!(GlyphImage::new(2, vec![0.5], 0, "f").is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let g = GlyphImage::new(2, vec![0.0, 0.25, 0.5, 1.0], 1, "f").unwrap();
        let t = g.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 1, 2, 2]);
        assert_eq!(GlyphImage::from_tensor(&t, 1, "f").unwrap(), g);
    }
}
