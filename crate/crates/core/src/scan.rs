//! Raster buffers, pixel rectangles and the `Scan` type.

use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::render::RenderPlan;

/// Default patch edge in pixels.
pub const PATCH_SIZE: usize = 16;

/// Intensity below which a pixel counts as ink.
pub const INK_THRESHOLD: f32 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("dimensions {height}x{width} are not multiples of {patch}")]
    NotPatchAligned { height: usize, width: usize, patch: usize },
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("buffer length {got} does not match {expected}")]
    Length { got: usize, expected: usize },
    #[error("image io: {0}")]
    Io(#[from] image::ImageError),
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> PixelBox {
        let (w, h) = (width as i64, height as i64);
        PixelBox {
            x0: self.x0.clamp(0, w),
            y0: self.y0.clamp(0, h),
            x1: self.x1.clamp(0, w),
            y1: self.y1.clamp(0, h),
        }
    }

    pub fn translate(&self, dx: i64, dy: i64) -> PixelBox {
        PixelBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

/// Row-major `H x W x C` buffer of intensities, white = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::Length {
                got: data.len(),
                expected,
            });
        }
        Ok(Self {
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean over channels at a pixel.
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        let base = (y * self.width + x) * self.channels;
        let s: f32 = self.data[base..base + self.channels].iter().sum();
        s / self.channels as f32
    }

    pub fn is_ink(&self, y: usize, x: usize) -> bool {
        self.luma(y, x) < INK_THRESHOLD
    }

    pub fn row_has_ink(&self, y: usize) -> bool {
        (0..self.width).any(|x| self.is_ink(y, x))
    }

    /// Number of ink-free rows below the lowest inked row.
    pub fn trailing_blank_rows(&self) -> usize {
        (0..self.height).rev().take_while(|&y| !self.row_has_ink(y)).count()
    }

    /// Total darkness `sum(1 - v)` over all samples.
    pub fn ink_mass(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(1.0 - v)).sum()
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, rect: &PixelBox) -> Raster {
        let r = rect.clamp_to(self.width, self.height);
        let (w, h) = (r.width().max(0) as usize, r.height().max(0) as usize);
        let mut out = Raster::filled(h, w, self.channels, 1.0);
        for y in 0..h {
            let src = ((r.y0 as usize + y) * self.width + r.x0 as usize) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels].copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Copy of rows `[y0, y0 + rows)`, padding with `fill` past the bottom.
    pub fn rows_window(&self, y0: usize, rows: usize, fill: f32) -> Raster {
        let mut out = Raster::filled(rows, self.width, self.channels, fill);
        let stride = self.width * self.channels;
        for y in 0..rows {
            let sy = y0 + y;
            if sy >= self.height {
                break;
            }
            out.data[y * stride..(y + 1) * stride].copy_from_slice(&self.data[sy * stride..(sy + 1) * stride]);
        }
        out
    }

    /// Stack rasters top to bottom; widths and channels must agree.
    pub fn vstack(parts: &[Raster]) -> Option<Raster> {
        let first = parts.first()?;
        let (w, c) = (first.width, first.channels);
        if parts.iter().any(|p| p.width != w || p.channels != c) {
            return None;
        }
        let height = parts.iter().map(|p| p.height).sum();
        let mut data = Vec::with_capacity(height * w * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Some(Raster {
            height,
            width: w,
            channels: c,
            data,
        })
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::filled(self.height, self.width, 1, 1.0);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, 0, self.luma(y, x));
            }
        }
        out
    }

    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Raster {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ImageError::Io(image::ImageError::IoError(e)))
    }

    /// Load a PNG (or any format the `image` crate decodes) as grayscale.
    pub fn load_gray(path: &Path) -> Result<Raster, ImageError> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Raster::from_vec(h as usize, w as usize, 1, data)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Raster, ImageError> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Raster::from_vec(h as usize, w as usize, 1, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanMeta {
    pub seed: u64,
    pub source_id: String,
    pub split: String,
    #[serde(default)]
    pub truncated: bool,
}

/// A patch-aligned raster with provenance and optional layout truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pixels: Raster,
    pub meta: ScanMeta,
    pub truth: Option<RenderPlan>,
}

impl Scan {
    pub fn new(pixels: Raster, meta: ScanMeta) -> Result<Self, ImageError> {
        let (h, w) = (pixels.height(), pixels.width());
        if h == 0 || w == 0 || h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(ImageError::NotPatchAligned {
                height: h,
                width: w,
                patch: PATCH_SIZE,
            });
        }
        Ok(Self {
            pixels,
            meta,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: RenderPlan) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn pixels(&self) -> &Raster {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }

    /// Replace the pixels keeping metadata; dimensions must not change.
    pub fn map_pixels(&self, pixels: Raster) -> Scan {
        assert_eq!(pixels.height(), self.height());
        assert_eq!(pixels.width(), self.width());
        Scan {
            pixels,
            meta: self.meta.clone(),
            truth: self.truth.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_rejects_unaligned() {
        assert!(Scan::new(Raster::filled(30, 32, 1, 1.0), ScanMeta::default()).is_err());
        assert!(Scan::new(Raster::filled(32, 48, 1, 1.0), ScanMeta::default()).is_ok());
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let mut r = Raster::filled(4, 5, 1, 1.0);
        r.set(1, 2, 0, 0.0);
        r.set(3, 4, 0, 0.5);
        let back = Raster::from_png_bytes(&r.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.get(1, 2, 0), 0.0);
        assert!((back.get(3, 4, 0) - 0.5).abs() < 1.0 / 255.0);
        assert_eq!(back.get(0, 0, 0), 1.0);
    }

    #[test]
    fn windows_pad_with_fill() {
        let r = Raster::filled(10, 4, 1, 0.0);
        let w = r.rows_window(8, 4, 1.0);
        assert_eq!(w.height(), 4);
        assert_eq!(w.get(1, 0, 0), 0.0);
        assert_eq!(w.get(2, 0, 0), 1.0);
    }
}
