//! Three minimal-change operations on a generated photo, exported to JavaScript.
//!
//! Pixel buffers crossing the boundary are RGBA, row-major, ready for `ImageData`.

use image::{Rgb, RgbImage};
use minchange::maps::{canny_from_foreground, dilate_mask};
use minchange::priors::{compose_background_real_prior, compose_foreground_real_prior, ColorBank, DiffusionBackend, ProceduralDiffusion};
use minchange::raster::{flat_rgb, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const OBJECT_COLORS: [[u8; 3]; 4] = [[196, 120, 60], [70, 90, 170], [90, 150, 80], [150, 70, 140]];

/// A flat-ish backdrop with one textured ellipse, and that ellipse as the foreground mask.
pub fn toy_photo(size: u32, seed: u64) -> (RgbImage, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = OBJECT_COLORS[rng.gen_range(0..OBJECT_COLORS.len())];
    let bg = [rng.gen_range(200..=235u8), rng.gen_range(200..=235u8), rng.gen_range(190..=225u8)];
    let s = size as f64;
    let (cx, cy) = (rng.gen_range(0.42..0.58) * s, rng.gen_range(0.45..0.6) * s);
    let (rx, ry) = (rng.gen_range(0.2..0.3) * s, rng.gen_range(0.16..0.26) * s);
    let inside = |x: u32, y: u32| {
        let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
        dx * dx + dy * dy <= 1.0
    };
    let mask = Mask::from_fn(size, size, inside);
    let photo = RgbImage::from_fn(size, size, |x, y| {
        let jitter = rng.gen_range(-10..=10);
        if inside(x, y) {
            // stripes give the edge map something to find inside the object
            let stripe = if (x + y) / 6 % 2 == 0 { 0 } else { -35 };
            Rgb(obj.map(|c| (c as i32 + stripe + jitter).clamp(0, 255) as u8))
        } else {
            Rgb(bg.map(|c| (c as i32 + jitter / 2).clamp(0, 255) as u8))
        }
    });
    (photo, mask)
}

pub fn to_rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn mask_rgba(mask: &Mask, on: [u8; 3]) -> Vec<u8> {
    (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .flat_map(|(x, y)| if mask.get(x, y) { [on[0], on[1], on[2], 255] } else { [0, 0, 0, 255] })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    photo: RgbImage,
    mask: Mask,
    bank: ColorBank,
}

impl Demo {
    pub fn background_rgb(&self, prompt: &str, seed: u32, dilation: u32) -> Result<RgbImage, String> {
        let (w, h) = self.photo.dimensions();
        let raw = ProceduralDiffusion.text_to_image(prompt, seed as u64, 1, w, h).map_err(|e| e.to_string())?;
        compose_background_real_prior(&self.photo, &self.mask, &raw, dilation).map_err(|e| e.to_string())
    }

    pub fn recolor_rgb(&self, color: &str, alpha: f32) -> Result<RgbImage, String> {
        let rgb = self.bank.lookup(color).ok_or_else(|| format!("unknown colour `{color}`"))?;
        let (w, h) = self.photo.dimensions();
        compose_foreground_real_prior(&self.photo, &self.mask, &flat_rgb(w, h, rgb), alpha).map_err(|e| e.to_string())
    }

    pub fn edges_mask(&self, low: f32, high: f32) -> Result<Mask, String> {
        if !(low >= 0.0 && high >= low) {
            return Err(format!("thresholds must satisfy 0 <= low <= high (got {low}, {high})"));
        }
        canny_from_foreground(&self.photo, &self.mask, low, high).map(|c| c.0).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u32) -> Demo {
        let (photo, mask) = toy_photo(size.clamp(16, 512), seed as u64);
        Demo { photo, mask, bank: ColorBank::standard() }
    }

    pub fn width(&self) -> u32 {
        self.photo.width()
    }

    pub fn height(&self) -> u32 {
        self.photo.height()
    }

    pub fn photo(&self) -> Vec<u8> {
        to_rgba(&self.photo)
    }

    /// The foreground mask grown by `dilation` pixels: the region a background swap keeps.
    pub fn kept_region(&self, dilation: u32) -> Vec<u8> {
        mask_rgba(&dilate_mask(&self.mask, dilation), [255, 255, 255])
    }

    pub fn colors(&self) -> Vec<String> {
        self.bank.names().map(String::from).collect()
    }

    /// Replace everything outside the dilated object with a generated backdrop for `prompt`.
    pub fn background(&self, prompt: &str, seed: u32, dilation: u32) -> Result<Vec<u8>, JsError> {
        self.background_rgb(prompt, seed, dilation).map(|i| to_rgba(&i)).map_err(|e| JsError::new(&e))
    }

    /// Blend a flat colour into the object with weight `alpha`; the backdrop is untouched.
    pub fn recolor(&self, color: &str, alpha: f32) -> Result<Vec<u8>, JsError> {
        self.recolor_rgb(color, alpha).map(|i| to_rgba(&i)).map_err(|e| JsError::new(&e))
    }

    /// Canny edges of the object only, white on black.
    pub fn edges(&self, low: f32, high: f32) -> Result<Vec<u8>, JsError> {
        self.edges_mask(low, high).map(|m| mask_rgba(&m, [255, 255, 255])).map_err(|e| JsError::new(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_swap_keeps_the_object() {
        let d = Demo::new(64, 3);
        for dilation in [0, 3, 9] {
            let out = d.background_rgb("a snowy forest", 1, dilation).unwrap();
            let kept = dilate_mask(&d.mask, dilation);
            let mut changed = 0;
            for (x, y, p) in out.enumerate_pixels() {
                if kept.get(x, y) {
                    assert_eq!(p, d.photo.get_pixel(x, y));
                } else {
                    changed += (p != d.photo.get_pixel(x, y)) as usize;
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn recolor_leaves_backdrop_alone() {
        let d = Demo::new(48, 5);
        let out = d.recolor_rgb("purple", 0.7).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            if !d.mask.get(x, y) {
                assert_eq!(p, d.photo.get_pixel(x, y));
            }
        }
        assert_eq!(d.recolor_rgb("purple", 0.0).unwrap(), d.photo);
        assert!(d.recolor_rgb("octarine", 0.5).unwrap_err().contains("octarine"));
        assert!(d.colors().iter().any(|c| c == "red"));
    }

    #[test]
    fn edges_stay_inside_the_object() {
        let d = Demo::new(64, 2);
        let e = d.edges_mask(50.0, 100.0).unwrap();
        assert!(e.count() > 0);
        assert!(e.is_subset_of(&d.mask));
        assert!(d.edges_mask(80.0, 10.0).is_err());
    }

    #[test]
    fn buffers_are_rgba_sized() {
        let d = Demo::new(40, 0);
        assert_eq!(d.photo().len(), 40 * 40 * 4);
        assert_eq!(d.kept_region(2).len(), 40 * 40 * 4);
        assert!(d.photo().chunks(4).all(|p| p[3] == 255));
        assert_eq!(Demo::new(4, 0).width(), 16);
    }

    #[test]
    fn same_seed_same_photo() {
        assert_eq!(toy_photo(32, 9), toy_photo(32, 9));
        assert_ne!(toy_photo(32, 9).0, toy_photo(32, 10).0);
    }
}
