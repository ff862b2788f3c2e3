//! Binary and soft single-channel rasters, plus the resampling and padding helpers used to move
//! images between their original size and the backend working resolution.

use image::imageops::{self, FilterType};
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageBuffer, ImageFormat, Luma, Pixel, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::write_atomic;

/// Strictly binary raster: every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![1; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Mask { width, height, data }
    }

    /// Build from raw 0/1 values in row-major order.
    pub fn from_bits(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Precondition("mask values must be 0 or 1".into()));
        }
        Ok(Mask { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * (self.width as usize) + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        let w = self.width as usize;
        self.data[(y as usize) * w + x as usize] = u8::from(on);
    }

    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dimensions() == other.dimensions()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        ensure_same(self.dimensions(), other.dimensions(), "mask intersection")?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        })
    }

    /// 0 → 0, 1 → 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Any non-zero pixel is on.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| u8::from(p[0] != 0)).collect(),
        }
    }

    /// Nearest-neighbour resample; keeps the mask binary.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Mask {
        if (width, height) == self.dimensions() {
            return self.clone();
        }
        let resized = imageops::resize(&self.to_gray(), width, height, FilterType::Nearest);
        Mask::from_gray(&resized)
    }
}

/// Soft mask with values in [0, 1], as returned by segmentation and matting backends.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl SoftMask {
    pub fn constant(width: u32, height: u32, value: f32) -> Self {
        SoftMask {
            width,
            height,
            data: vec![value; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        SoftMask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }
}

pub(crate) fn ensure_same(a: (u32, u32), b: (u32, u32), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Size of an image scaled so its long side equals `long_side`, aspect preserved.
pub fn working_size(width: u32, height: u32, long_side: u32) -> (u32, u32) {
    let long = width.max(height).max(1) as f64;
    let scale = long_side as f64 / long;
    let w = ((width as f64 * scale).round() as u32).max(1);
    let h = ((height as f64 * scale).round() as u32).max(1);
    (w, h)
}

/// Bilinear resample of an RGB raster.
pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

/// Reflect-pad right/bottom so both sides are multiples of `multiple`.
pub fn reflect_pad(img: &RgbImage, multiple: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    RgbImage::from_fn(pw, ph, |x, y| *img.get_pixel(reflect(x, w), reflect(y, h)))
}

/// Reflect-pad a mask the same way as [`reflect_pad`].
pub fn reflect_pad_mask(mask: &Mask, multiple: u32) -> Mask {
    let (w, h) = mask.dimensions();
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    Mask::from_fn(pw, ph, |x, y| mask.get(reflect(x, w), reflect(y, h)))
}

fn reflect(i: u32, n: u32) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn crop(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    imageops::crop_imm(img, 0, 0, width, height).to_image()
}

pub fn flat_rgb(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(rgb))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Lossless PNG, written atomically.
pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(img)?)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(&mask.to_gray())?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Mask::from_gray(&image::load_from_memory(&bytes)?.to_luma8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn working_size_preserves_aspect() {
        assert_eq!(working_size(2048, 1024, 1024), (1024, 512));
        assert_eq!(working_size(300, 400, 1024), (768, 1024));
        assert_eq!(working_size(1, 1000, 10), (1, 10));
    }

    #[test]
    fn reflect_pad_mirrors_interior() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8, y as u8, 0]));
        let padded = reflect_pad(&img, 4);
        assert_eq!(padded.dimensions(), (8, 4));
        assert_eq!(padded.get_pixel(5, 0)[0], 3);
        assert_eq!(padded.get_pixel(7, 0)[0], 1);
        assert_eq!(padded.get_pixel(0, 3)[1], 1);
        assert_eq!(crop(&padded, 5, 3), img);
    }

    #[test]
    fn nearest_resize_stays_binary() {
        let m = Mask::from_fn(7, 5, |x, y| (x + y) % 2 == 0);
        let r = m.resize_nearest(20, 13);
        assert!(r.bits().iter().all(|&v| v <= 1));
        assert_eq!(r.dimensions(), (20, 13));
    }

    #[test]
    fn from_bits_rejects_non_binary() {
        assert!(Mask::from_bits(2, 1, vec![0, 2]).is_err());
        assert!(Mask::from_bits(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        save_rgb(&img, dir.path().join("a/b.png")).unwrap();
        assert_eq!(load_rgb(dir.path().join("a/b.png")).unwrap(), img);
        let m = Mask::from_fn(5, 3, |x, y| x == y);
        save_mask(&m, dir.path().join("m.png")).unwrap();
        assert_eq!(load_mask(dir.path().join("m.png")).unwrap(), m);
        assert!(load_rgb(dir.path().join("missing.png")).is_err());
    }
}
