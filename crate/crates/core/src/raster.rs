//! Floating-point images and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane size mismatch");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
            .save(path)?;
        Ok(())
    }
}

/// RGB image with linear channel values, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height, "image size mismatch");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: [f64; 3]) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: [f64; 3]) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane::new(self.width, self.height, self.data.iter().map(|p| p[c]).collect())
    }

    /// `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Plane {
        Plane::new(
            self.width,
            self.height,
            self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect(),
        )
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|p| p[0] + p[1] + p[2]).sum::<f64>() / (3 * self.data.len()).max(1) as f64
    }

    pub fn clamped(&self) -> RgbImage {
        RgbImage::new(self.width, self.height, self.data.iter().map(|p| p.map(|v| v.clamp(0.0, 1.0))).collect())
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> RgbImage {
        RgbImage::new(self.width, self.height, self.data.iter().map(|p| p.map(|v| quantize(v) as f64 / 255.0)).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().flat_map(|p| p.map(quantize)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer matches dimensions")
            .save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)
            .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
        Ok(RgbImage::new(w as usize, h as usize, data))
    }
}

/// `[0, 1]` value to the nearest 8-bit code.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
