//! Float RGB images, single-channel planes and pixel rectangles.
//!
//! Images are channel-last, row-major, with values nominally in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width as u32, height as u32)
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    /// Non-empty and inside a `width × height` image.
    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 as usize <= width && self.y1 as usize <= height
    }

    pub fn check_in(&self, width: usize, height: usize) -> Result<()> {
        if self.is_valid_in(width, height) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "bbox ({}, {}, {}, {}) not within {width}x{height}",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x) && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        (!b.is_empty()).then_some(b)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersect(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Grows the box by `pad` on every side and clips it to the image.
    pub fn pad_clip(&self, pad: u32, width: usize, height: usize) -> BBox {
        BBox::new(
            self.x0.saturating_sub(pad),
            self.y0.saturating_sub(pad),
            (self.x1 + pad).min(width as u32),
            (self.y1 + pad).min(height as u32),
        )
    }

    /// Iterates `(x, y)` over the covered pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> {
        let (x0, x1) = (self.x0 as usize, self.x1 as usize);
        (self.y0 as usize..self.y1 as usize).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Single-channel float raster (grayscale, depth, masks as 0/1).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn crop(&self, b: &BBox) -> Plane {
        Plane::from_fn(b.width() as usize, b.height() as usize, |x, y| {
            self.get(x + b.x0 as usize, y + b.y0 as usize)
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// RGB float image, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height}x3 needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| self.get(x, y, c))
    }

    pub fn set_channel(&mut self, c: usize, plane: &Plane) {
        for y in 0..self.height {
            for x in 0..self.width {
                self.set(x, y, c, plane.get(x, y));
            }
        }
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| {
            let [r, g, b] = self.pixel(x, y);
            0.299 * r + 0.587 * g + 0.114 * b
        })
    }

    pub fn crop(&self, b: &BBox) -> Image {
        Image::from_fn(b.width() as usize, b.height() as usize, |x, y| {
            self.pixel(x + b.x0 as usize, y + b.y0 as usize)
        })
    }

    /// Writes `patch` with its top-left corner at `(x0, y0)`; `patch` must fit.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) {
        for y in 0..patch.height {
            for x in 0..patch.width {
                self.put_pixel(x0 + x, y0 + y, patch.pixel(x, y));
            }
        }
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.width * self.height).max(1) as f64;
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        acc.map(|v| v / n)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Maximum absolute difference over all samples.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bicubic (Keys, a = −0.5) resampling with edge clamping.
    pub fn resize_bicubic(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let cubic = |t: f64| {
            let a = -0.5;
            let t = t.abs();
            if t <= 1.0 {
                (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
            } else if t < 2.0 {
                a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
            } else {
                0.0
            }
        };
        let clampx = |v: isize| v.clamp(0, self.width as isize - 1) as usize;
        let clampy = |v: isize| v.clamp(0, self.height as isize - 1) as usize;
        Image::from_fn(width, height, |x, y| {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let ix = fx.floor() as isize;
            let iy = fy.floor() as isize;
            let mut acc = [0.0; 3];
            for m in -1..=2 {
                let wy = cubic(fy - (iy + m) as f64);
                if wy == 0.0 {
                    continue;
                }
                for n in -1..=2 {
                    let wx = cubic(fx - (ix + n) as f64);
                    let p = self.pixel(clampx(ix + n), clampy(iy + m));
                    for c in 0..3 {
                        acc[c] += wx * wy * p[c];
                    }
                }
            }
            acc
        })
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Shape("rgb8 buffer length".into()));
        }
        Ok(Image {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
        let rgb = img.to_rgb8();
        Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb8(self.width, self.height, &self.to_rgb8())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn encode_png_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Encodes a binary raster as an 8-bit grayscale PNG (0 or 255).
pub fn encode_binary_png(width: usize, height: usize, bits: &[bool]) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

use image::ImageEncoder as _;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_geometry() {
        let a = BBox::new(0, 0, 4, 4);
        let b = BBox::new(2, 2, 6, 6);
        assert_eq!(a.intersect(&b), Some(BBox::new(2, 2, 4, 4)));
        assert!((a.iou(&b) - 4.0 / 28.0).abs() < 1e-12);
        assert_eq!(a.intersect(&BBox::new(4, 0, 5, 1)), None);
        assert!(a.is_valid_in(4, 4));
        assert!(!a.is_valid_in(3, 4));
        assert_eq!(a.pixels().count(), 16);
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = Image::filled(5, 7, [0.2, 0.4, 0.6]);
        let up = img.resize_bicubic(10, 14);
        for v in up.pixel(3, 9).iter().zip([0.2, 0.4, 0.6]) {
            assert!((v.0 - v.1).abs() < 1e-12);
        }
        let down = up.resize_bicubic(5, 7);
        assert!(down.linf_distance(&img) < 1e-12);
    }

    #[test]
    fn png_roundtrip_rgb8() {
        let img = Image::from_fn(3, 2, |x, y| [x as f64 / 2.0, y as f64, 0.0]);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert!(back.linf_distance(&img) <= 0.5 / 255.0 + 1e-12);
    }
}
